"""Temporal tri-plane video generator.

Appearance and motion are driven by independent Gaussian latents. The
appearance code and a camera pose map to per-layer style vectors; the motion
code, multiplied elementwise by the normalized timestep, feeds per-layer
motion heads whose outputs modulate the first k_motion synthesis layers via
an extra modulated convolution. The synthesis stack turns a learned constant
into three feature planes, which are volume-rendered at a base resolution
and refined to the final resolution by a style-modulated upsampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .camera import POSE_DIM, CameraPose
from .renderer import RadianceDecoder, RenderOutput, TriPlane, render_planes_batch

CAMERA_MODES = ("All", "Non", "Map", "MapT")


@dataclass
class GeneratorConfig:
    """Architecture and scene hyperparameters.

    k_motion is the number of leading synthesis layers that receive motion
    features. camera_mode selects how camera poses condition the mapping
    network and renderer during training and inference (All / Non / Map /
    MapT). Scene bounds and the ray interval are per-dataset values; the
    defaults suit the bundled synthetic dataset (orbit radius 2.7).
    """

    k_motion: int = 4
    layer_count: int = 7
    plane_channels: int = 16
    plane_resolution: int = 64
    base_resolution: int = 32
    final_resolution: int = 64
    camera_mode: str = "MapT"
    max_frames: int = 16
    z_dim_appearance: int = 64
    z_dim_motion: int = 64
    style_dim: int = 64
    mapping_hidden: int = 64
    motion_hidden: int = 64
    decoder_hidden: int = 64
    feature_channels: int = 8
    sr_hidden: int = 32
    channel_base: int = 2048
    channel_max: int = 64
    plane_bounds: float = 0.5
    ray_near: float = 2.0
    ray_far: float = 3.4

    def __post_init__(self):
        if not 0 <= self.k_motion <= self.layer_count:
            raise ValueError(f"k_motion must lie in [0, layer_count], got {self.k_motion}")
        if self.base_resolution > self.final_resolution:
            raise ValueError("base_resolution must not exceed final_resolution")
        if self.camera_mode not in CAMERA_MODES:
            raise ValueError(f"camera_mode must be one of {CAMERA_MODES}")
        up = self.final_resolution / self.base_resolution
        if 2 ** round(math.log2(up)) != up:
            raise ValueError("final_resolution must be a power-of-two multiple of base_resolution")
        sched = self.resolution_schedule()
        if sched[-1] != self.plane_resolution:
            raise ValueError(
                f"layer_count {self.layer_count} cannot reach plane_resolution {self.plane_resolution} from 4"
            )
        if self.max_frames < 2:
            raise ValueError("max_frames must be >= 2")

    def resolution_schedule(self) -> list[int]:
        """Output resolution of each synthesis layer, doubling from 4."""
        return [min(4 * 2**k, self.plane_resolution) for k in range(self.layer_count)]

    def width(self, resolution: int) -> int:
        return max(8, min(self.channel_max, self.channel_base // resolution))

    def timestep(self, frame_index: int) -> float:
        """Normalized time of a frame index; index 0 maps to t = 0."""
        return frame_index / (self.max_frames - 1)


def modulated_conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    scales: torch.Tensor,
    demodulate: bool = True,
    padding: int = 1,
    eps: float = 1e-8,
) -> torch.Tensor:
    """Convolve with kernels scaled per input channel and renormalized.

    Args:
        x: (B, Cin, H, W).
        weight: (Cout, Cin, kh, kw).
        scales: (B, Cin) per-input-channel multipliers.
        demodulate: rescale each output channel of the modulated kernel to
            unit energy (1 / sqrt(sum w^2 + eps)).
    """
    b, cin, h, w_ = x.shape
    cout = weight.shape[0]
    w = weight.unsqueeze(0) * scales.reshape(b, 1, cin, 1, 1)  # (B, Cout, Cin, kh, kw)
    if demodulate:
        d = torch.rsqrt(w.pow(2).sum(dim=(2, 3, 4)) + eps)  # (B, Cout)
        w = w * d.reshape(b, cout, 1, 1, 1)
    out = F.conv2d(
        x.reshape(1, b * cin, h, w_),
        w.reshape(b * cout, cin, *weight.shape[2:]),
        padding=padding,
        groups=b,
    )
    return out.reshape(b, cout, out.shape[-2], out.shape[-1])


class ModulatedConv(nn.Module):
    """Style-modulated 3x3 (or 1x1) convolution, no bias, no activation.

    The style vector is projected by an affine layer (bias initialized to 1)
    to per-input-channel scales before modulating the shared kernel.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, style_dim: int, demodulate: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.demodulate = demodulate
        self.padding = kernel_size // 2
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size) / math.sqrt(fan_in))
        self.affine = nn.Linear(style_dim, in_channels)
        nn.init.normal_(self.affine.weight, std=1.0 / math.sqrt(style_dim))
        nn.init.ones_(self.affine.bias)

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        scales = self.affine(style)
        return modulated_conv2d(x, self.weight, scales, demodulate=self.demodulate, padding=self.padding)


class SynthesisLayer(nn.Module):
    """One synthesis layer: two style blocks with an optional motion branch.

    The first block (optional 2x upsample, then modulated conv + bias +
    leaky ReLU) produces intermediate features f*; when this layer hosts a
    motion branch, f* gains an additive motion-modulated convolution of
    itself before the second block.
    """

    def __init__(self, in_channels: int, out_channels: int, style_dim: int, upsample: bool, motion: bool):
        super().__init__()
        self.upsample = upsample
        self.conv0 = ModulatedConv(in_channels, out_channels, 3, style_dim)
        self.bias0 = nn.Parameter(torch.zeros(out_channels))
        self.motion_conv = ModulatedConv(out_channels, out_channels, 3, style_dim) if motion else None
        self.conv1 = ModulatedConv(out_channels, out_channels, 3, style_dim)
        self.bias1 = nn.Parameter(torch.zeros(out_channels))

    @property
    def has_motion(self) -> bool:
        return self.motion_conv is not None

    def first_block(self, f_prev: torch.Tensor, w_a: torch.Tensor) -> torch.Tensor:
        x = f_prev
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return F.leaky_relu(self.conv0(x, w_a) + self.bias0.reshape(1, -1, 1, 1), 0.2)

    def second_block(self, f_star: torch.Tensor, w_a: torch.Tensor) -> torch.Tensor:
        return F.leaky_relu(self.conv1(f_star, w_a) + self.bias1.reshape(1, -1, 1, 1), 0.2)

    def forward(self, f_prev: torch.Tensor, w_a: torch.Tensor, w_m: Optional[torch.Tensor] = None) -> torch.Tensor:
        if w_m is not None and self.motion_conv is None:
            raise ValueError("motion style supplied to a synthesis layer without a motion branch")
        f_star = self.first_block(f_prev, w_a)
        if self.motion_conv is not None and w_m is not None:
            f_star = f_star + self.motion_conv(f_star, w_m)
        return self.second_block(f_star, w_a)


class AppearanceMapping(nn.Module):
    """Maps (appearance latent, flat camera pose) to one style vector."""

    def __init__(self, z_dim: int, style_dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(z_dim + POSE_DIM, hidden)
        self.fc2 = nn.Linear(hidden, style_dim)

    def forward(self, z_a: torch.Tensor, pose_flat: torch.Tensor) -> torch.Tensor:
        x = torch.cat([z_a, pose_flat], dim=-1)
        return self.fc2(F.leaky_relu(self.fc1(x), 0.2))


class MotionLayer(nn.Module):
    """Per-layer motion head: encodes (motion latent * timestep).

    The product z_m * t passes through a lightweight two-layer head with
    leaky-ReLU activations, then a two-layer perceptron projects to the
    style dimension. At t = 0 the input collapses to the zero vector, so
    the output is the same for every motion latent.
    """

    def __init__(self, z_dim: int, style_dim: int, hidden: int):
        super().__init__()
        self.head = nn.Sequential(
            nn.Linear(z_dim, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(0.2),
        )
        self.mlp = nn.Sequential(
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, style_dim),
        )

    def forward(self, z_m: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=z_m.dtype, device=z_m.device)
        if t.ndim == 0:
            t = t.expand(z_m.shape[0])
        return self.mlp(self.head(z_m * t.unsqueeze(-1)))


class SuperResolution(nn.Module):
    """Refines the raw render to the final resolution.

    A residual branch (style-modulated convolutions over the concatenated
    raw RGB and render features, upsampled to the final size, projected to
    RGB by a zero-initialized 1x1 conv) is added to a plain bilinear
    upsample of the raw RGB, so the module starts as an identity-like map.
    """

    def __init__(self, feature_channels: int, style_dim: int, hidden: int, up_factor: int):
        super().__init__()
        if up_factor < 1 or 2 ** round(math.log2(up_factor)) != up_factor:
            raise ValueError("up_factor must be a power of two")
        self.up_factor = up_factor
        self.conv_in = ModulatedConv(3 + feature_channels, hidden, 3, style_dim)
        self.bias_in = nn.Parameter(torch.zeros(hidden))
        self.stages = nn.ModuleList(
            ModulatedConv(hidden, hidden, 3, style_dim) for _ in range(int(round(math.log2(up_factor))))
        )
        self.stage_biases = nn.ParameterList(torch.zeros(hidden) for _ in self.stages)
        self.to_rgb = nn.Conv2d(hidden, 3, 1)
        nn.init.zeros_(self.to_rgb.weight)
        nn.init.zeros_(self.to_rgb.bias)

    def forward(self, raw_rgb: torch.Tensor, features: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        if self.up_factor == 1:
            base = raw_rgb
        else:
            base = F.interpolate(raw_rgb, scale_factor=self.up_factor, mode="bilinear", align_corners=False)
        x = F.leaky_relu(self.conv_in(torch.cat([raw_rgb, features], dim=1), style) + self.bias_in.reshape(1, -1, 1, 1), 0.2)
        for conv, bias in zip(self.stages, self.stage_biases):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = F.leaky_relu(conv(x, style) + bias.reshape(1, -1, 1, 1), 0.2)
        return base + self.to_rgb(x)


def style_mix(w_plus_1: torch.Tensor, w_plus_2: torch.Tensor, k_mix: int) -> torch.Tensor:
    """Take the first k_mix per-layer styles from the second code.

    Operates on (..., L, style_dim) stacks; k_mix = 0 returns the first
    code, k_mix = L the second.
    """
    if w_plus_1.shape != w_plus_2.shape:
        raise ValueError("per-layer style stacks must have matching shapes")
    layers = w_plus_1.shape[-2]
    if not 0 <= k_mix <= layers:
        raise ValueError(f"k_mix must lie in [0, {layers}]")
    out = w_plus_1.clone()
    out[..., :k_mix, :] = w_plus_2[..., :k_mix, :]
    return out


class Generator(nn.Module):
    """Full video generator: mapping, motion layers, synthesis, renderer, SR."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        cfg = config
        self.mapping = AppearanceMapping(cfg.z_dim_appearance, cfg.style_dim, cfg.mapping_hidden)
        self.motion_layers = nn.ModuleList(
            MotionLayer(cfg.z_dim_motion, cfg.style_dim, cfg.motion_hidden) for _ in range(cfg.k_motion)
        )
        schedule = cfg.resolution_schedule()
        self.const = nn.Parameter(torch.randn(cfg.width(4), 4, 4))
        layers = []
        prev_res, prev_width = 4, cfg.width(4)
        for k, res in enumerate(schedule):
            width = cfg.width(res)
            layers.append(
                SynthesisLayer(
                    prev_width,
                    width,
                    cfg.style_dim,
                    upsample=res != prev_res,
                    motion=k < cfg.k_motion,
                )
            )
            prev_res, prev_width = res, width
        self.layers = nn.ModuleList(layers)
        self.to_planes = nn.Conv2d(prev_width, 3 * cfg.plane_channels, 1)
        self.decoder = RadianceDecoder(cfg.plane_channels, cfg.decoder_hidden, cfg.feature_channels)
        self.super_res = SuperResolution(
            cfg.feature_channels,
            cfg.style_dim,
            cfg.sr_hidden,
            cfg.final_resolution // cfg.base_resolution,
        )

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def _param_dtype(self) -> torch.dtype:
        return self.const.dtype

    def map_appearance(self, z_a: torch.Tensor, pose: CameraPose | torch.Tensor) -> torch.Tensor:
        """Map latents to replicated per-layer styles: (B, L, style_dim)."""
        if isinstance(pose, CameraPose):
            pose_flat = pose.flatten().unsqueeze(0)
        else:
            pose_flat = torch.as_tensor(pose)
            if pose_flat.ndim == 1:
                pose_flat = pose_flat.unsqueeze(0)
        z = torch.as_tensor(z_a)
        if z.ndim == 1:
            z = z.unsqueeze(0)
        dtype = self._param_dtype()
        pose_flat = pose_flat.to(dtype).expand(z.shape[0], -1)
        w = self.mapping(z.to(dtype), pose_flat)
        return w.unsqueeze(1).expand(-1, self.num_layers, -1)

    def motion_codes(self, z_m: torch.Tensor, t) -> torch.Tensor:
        """Per-layer motion styles: (B, K, style_dim); K may be zero."""
        z = torch.as_tensor(z_m)
        if z.ndim == 1:
            z = z.unsqueeze(0)
        z = z.to(self._param_dtype())
        t_t = torch.as_tensor(t, dtype=z.dtype, device=z.device)
        if t_t.ndim == 0:
            t_t = t_t.expand(z.shape[0])
        if len(self.motion_layers) == 0:
            return torch.zeros(z.shape[0], 0, self.config.style_dim, dtype=z.dtype, device=z.device)
        return torch.stack([layer(z, t_t) for layer in self.motion_layers], dim=1)

    def synthesize_planes(
        self,
        w_plus: torch.Tensor,
        motion: Optional[torch.Tensor] = None,
        capture_activations: bool = False,
    ):
        """Run the synthesis stack; returns (B, 3, C, R, R) plane features."""
        if w_plus.ndim == 2:
            w_plus = w_plus.unsqueeze(0)
        b = w_plus.shape[0]
        if w_plus.shape[1] != self.num_layers:
            raise ValueError(f"expected {self.num_layers} per-layer styles, got {w_plus.shape[1]}")
        k = self.config.k_motion
        if motion is not None and motion.ndim == 2:
            motion = motion.unsqueeze(0)
        x = self.const.unsqueeze(0).expand(b, -1, -1, -1)
        activations = []
        for idx, layer in enumerate(self.layers):
            w_m = None
            if idx < k and motion is not None and motion.shape[1] > idx:
                w_m = motion[:, idx]
            x = layer(x, w_plus[:, idx], w_m)
            if capture_activations:
                activations.append(x)
        cfg = self.config
        planes = self.to_planes(x).reshape(b, 3, cfg.plane_channels, cfg.plane_resolution, cfg.plane_resolution)
        if capture_activations:
            return planes, activations
        return planes

    def generate_triplane(self, z_a: torch.Tensor, z_m: torch.Tensor, t: float, pose_cond: CameraPose) -> TriPlane:
        """Scene for one (appearance, motion, timestep, conditioning pose)."""
        w_plus = self.map_appearance(z_a, pose_cond)
        motion = self.motion_codes(z_m, t)
        planes = self.synthesize_planes(w_plus, motion)
        return TriPlane(planes[0], self.config.plane_bounds)

    def render_planes(
        self,
        planes: torch.Tensor,
        render_poses: Sequence[CameraPose],
        steps: int,
        resolution: Optional[int] = None,
        seeds: Optional[Sequence[Optional[int]]] = None,
    ) -> RenderOutput:
        cfg = self.config
        return render_planes_batch(
            planes,
            cfg.plane_bounds,
            self.decoder,
            render_poses,
            resolution or cfg.base_resolution,
            cfg.ray_near,
            cfg.ray_far,
            steps,
            seeds=seeds,
        )

    def generate_frames(
        self,
        w_plus: torch.Tensor,
        motion: Optional[torch.Tensor],
        render_poses: Sequence[CameraPose],
        steps: int,
        resolution: Optional[int] = None,
        seeds: Optional[Sequence[Optional[int]]] = None,
    ) -> tuple[torch.Tensor, RenderOutput]:
        """Synthesize, render, and super-resolve a batch of frames.

        Returns final frames (B, 3, final, final) and the raw render output.
        """
        planes = self.synthesize_planes(w_plus, motion)
        raw = self.render_planes(planes, render_poses, steps, resolution=resolution, seeds=seeds)
        raw_rgb = raw.rgb.permute(0, 3, 1, 2)
        feats = raw.features.permute(0, 3, 1, 2)
        if w_plus.ndim == 2:
            w_plus = w_plus.unsqueeze(0)
        frames = self.super_res(raw_rgb, feats, w_plus[:, -1])
        return frames, raw

    def generate_frame(
        self,
        z_a: torch.Tensor,
        z_m: torch.Tensor,
        t: float,
        c_render: CameraPose,
        c_cond: CameraPose,
        steps: int = 48,
        seed: Optional[int] = None,
    ) -> tuple[torch.Tensor, RenderOutput]:
        """Single-frame convenience wrapper; returns ((3, H, W), raw render)."""
        w_plus = self.map_appearance(z_a, c_cond)
        motion = self.motion_codes(z_m, t)
        frames, raw = self.generate_frames(w_plus, motion, [c_render], steps, seeds=[seed])
        return frames[0], RenderOutput(
            rgb=raw.rgb[0], depth=raw.depth[0], opacity=raw.opacity[0], features=raw.features[0]
        )

"""Camera-conditioned image and dual-frame video discriminators.

Both critics are convolutional and inject their camera condition by
projection conditioning: the conditioning vector is embedded linearly and
its inner product with the final feature vector is added to the logit.
The image critic scores one frame at a time from a 6-channel stack (final
RGB plus the bilinearly upsampled raw render); the video critic scores a
frame pair plus a constant timestep-difference plane (7 channels),
conditioned on the 50-dim concatenation of both camera poses.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .camera import POSE_DIM


class _ConvBackbone(nn.Module):
    """Strided conv stack from `resolution` down to 4x4, then a feature FC."""

    def __init__(self, in_channels: int, resolution: int, feature_dim: int = 64):
        super().__init__()
        if resolution < 8 or 2 ** round(math.log2(resolution)) != resolution:
            raise ValueError("resolution must be a power of two >= 8")
        self.resolution = resolution
        convs = []
        width_in = in_channels
        res = resolution
        width = 32
        while res > 4:
            convs.append(nn.Conv2d(width_in, width, 3, stride=2, padding=1))
            width_in = width
            width = min(64, width * 2)
            res //= 2
        self.convs = nn.ModuleList(convs)
        self.fc = nn.Linear(width_in * 16, feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.resolution or x.shape[-2] != self.resolution:
            raise ValueError(
                f"expected {self.resolution}x{self.resolution} input, got {tuple(x.shape[-2:])}"
            )
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return F.leaky_relu(self.fc(x.flatten(1)), 0.2)


class ImageDiscriminator(nn.Module):
    """Per-frame realness critic over the (final, upsampled raw) RGB stack."""

    def __init__(self, resolution: int, feature_dim: int = 64):
        super().__init__()
        self.backbone = _ConvBackbone(6, resolution, feature_dim)
        self.head = nn.Linear(feature_dim, 1)
        self.cond_embed = nn.Linear(POSE_DIM, feature_dim, bias=False)
        self._scale = 1.0 / math.sqrt(feature_dim)

    def embed_condition(self, pose_flat: torch.Tensor) -> torch.Tensor:
        return self.cond_embed(pose_flat)

    def forward(self, frame_hi: torch.Tensor, frame_raw: torch.Tensor, pose_flat: torch.Tensor) -> torch.Tensor:
        """Score frames: (B, 3, H, H), (B, 3, h, h), (B, 25) -> (B,) logits."""
        target = frame_hi.shape[-2:]
        if frame_raw.shape[-2:] != target:
            frame_raw = F.interpolate(frame_raw, size=target, mode="bilinear", align_corners=False)
        feat = self.backbone(torch.cat([frame_hi, frame_raw], dim=1))
        proj = (self.embed_condition(pose_flat) * feat).sum(dim=-1) * self._scale
        return self.head(feat).squeeze(-1) + proj


class VideoDiscriminator(nn.Module):
    """Motion-plausibility critic over an ordered frame pair.

    Input is [frame_i, frame_j, dt-plane] (7 channels); the condition is
    [c_i, c_j], so swapping the frames and poses while negating dt presents
    a different conditioning vector and the critic can tell the orderings
    apart.
    """

    def __init__(self, resolution: int, feature_dim: int = 64):
        super().__init__()
        self.backbone = _ConvBackbone(7, resolution, feature_dim)
        self.head = nn.Linear(feature_dim, 1)
        self.cond_embed = nn.Linear(2 * POSE_DIM, feature_dim, bias=False)
        self._scale = 1.0 / math.sqrt(feature_dim)

    def embed_condition(self, c_i: torch.Tensor, c_j: torch.Tensor) -> torch.Tensor:
        return self.cond_embed(torch.cat([c_i, c_j], dim=-1))

    def forward(
        self,
        frame_i: torch.Tensor,
        frame_j: torch.Tensor,
        dt: torch.Tensor,
        c_i: torch.Tensor,
        c_j: torch.Tensor,
    ) -> torch.Tensor:
        """Score pairs: frames (B, 3, H, H), dt (B,), poses (B, 25) -> (B,)."""
        if frame_i.shape != frame_j.shape:
            raise ValueError("frame pair must share a resolution")
        b, _, h, w = frame_i.shape
        dt = torch.as_tensor(dt, dtype=frame_i.dtype, device=frame_i.device).reshape(b, 1, 1, 1)
        dt_plane = dt.expand(b, 1, h, w)
        feat = self.backbone(torch.cat([frame_i, frame_j, dt_plane], dim=1))
        proj = (self.embed_condition(c_i, c_j) * feat).sum(dim=-1) * self._scale
        return self.head(feat).squeeze(-1) + proj

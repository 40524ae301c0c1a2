"""Tri-plane scene sampling and emission-absorption volume rendering.

A scene at one time instant is three axis-aligned feature planes; a 3D
point's feature is the sum of its bilinear samples on the XY, XZ, and YZ
planes. A small decoder maps features to density and color, and rays are
integrated with alpha compositing. Everything is differentiable end to end
with respect to plane entries and decoder parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .camera import CameraPose, RayBundle, generate_rays

_DEPTH_EPS = 1e-8


@dataclass(frozen=True)
class TriPlane:
    """Three feature planes spanning (x,y), (x,z), (y,z) of a cube.

    planes[0][c, iy, ix], planes[1][c, iz, ix], planes[2][c, iz, iy]: the
    first projected coordinate indexes columns, the second indexes rows.
    """

    planes: torch.Tensor  # (3, C, R, R)
    bounds: float = 0.5  # cube half-extent in world units

    def __post_init__(self):
        if self.planes.ndim != 4 or self.planes.shape[0] != 3 or self.planes.shape[2] != self.planes.shape[3]:
            raise ValueError(f"planes must have shape (3, C, R, R), got {tuple(self.planes.shape)}")
        if not torch.isfinite(self.planes).all():
            raise ValueError("plane entries must be finite")
        if self.bounds <= 0:
            raise ValueError("bounds must be positive")


@dataclass
class RenderOutput:
    """Per-pixel render results at the raw (neural rendering) resolution.

    depth is the expected termination distance under the compositing
    weights; opacity is 1 - final transmittance; features is the pre-clamp
    color feature vector used by the super-resolution head.
    """

    rgb: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W)
    opacity: torch.Tensor  # (H, W)
    features: torch.Tensor  # (H, W, F)


def _plane_grids(points: torch.Tensor, bounds: float) -> torch.Tensor:
    """Project points onto the three planes; (B, M, 3) -> (B, 3, M, 2)."""
    p = points / bounds
    xy = p[..., (0, 1)]
    xz = p[..., (0, 2)]
    yz = p[..., (1, 2)]
    return torch.stack([xy, xz, yz], dim=-3)


def sample_planes_batch(planes: torch.Tensor, points: torch.Tensor, bounds: float) -> torch.Tensor:
    """Sample batched tri-planes: (B, 3, C, R, R) x (B, M, 3) -> (B, M, C).

    Bilinear interpolation with border clamping; the three plane samples
    are summed per point.
    """
    b, _, c, r, _ = planes.shape
    m = points.shape[1]
    grids = _plane_grids(points.to(planes.dtype), bounds)  # (B, 3, M, 2)
    flat_planes = planes.reshape(b * 3, c, r, r)
    flat_grids = grids.reshape(b * 3, m, 1, 2)
    sampled = F.grid_sample(
        flat_planes,
        flat_grids,
        mode="bilinear",
        padding_mode="border",
        align_corners=True,
    )  # (B*3, C, M, 1)
    sampled = sampled.reshape(b, 3, c, m).sum(dim=1)  # (B, C, M)
    return sampled.permute(0, 2, 1)


def sample_triplane(triplane: TriPlane, points: torch.Tensor) -> torch.Tensor:
    """Feature lookup for (M, 3) world points; returns (M, C)."""
    pts = torch.as_tensor(points)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (M, 3), got {tuple(pts.shape)}")
    out = sample_planes_batch(triplane.planes.unsqueeze(0), pts.unsqueeze(0), triplane.bounds)
    return out[0]


class RadianceDecoder(nn.Module):
    """Maps tri-plane features to (density, color, color features).

    Two-layer perceptron with softplus activations; density is the softplus
    of the first output channel, color is the sigmoid of the first three
    feature channels, and the raw feature vector is kept for the
    super-resolution head.
    """

    def __init__(self, in_channels: int, hidden: int = 64, feature_channels: int = 8):
        super().__init__()
        if feature_channels < 3:
            raise ValueError("feature_channels must be >= 3")
        self.in_channels = in_channels
        self.feature_channels = feature_channels
        self.fc1 = nn.Linear(in_channels, hidden)
        self.fc2 = nn.Linear(hidden, 1 + feature_channels)

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if features.shape[-1] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} feature channels, got {features.shape[-1]}"
            )
        h = F.softplus(self.fc1(features))
        out = self.fc2(h)
        density = F.softplus(out[..., 0])
        feats = out[..., 1:]
        color = torch.sigmoid(feats[..., :3])
        return density, color, feats


def composite(
    densities: torch.Tensor,
    colors: torch.Tensor,
    deltas: torch.Tensor,
    distances: Optional[torch.Tensor] = None,
    eps: float = _DEPTH_EPS,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Alpha-composite samples along rays.

    Discretizes the emission-absorption integral with per-interval alpha
    a_i = 1 - exp(-density_i * delta_i) and transmittance
    T_i = prod_{j<i} (1 - a_j):

        pixel   = sum_i T_i a_i color_i
        opacity = 1 - T_S
        depth   = sum_i T_i a_i s_i / max(opacity, eps)

    Args:
        densities: (..., S) non-negative.
        colors: (..., S, C).
        deltas: (..., S) or broadcastable; interval widths, positive.
        distances: (..., S) sample distances s_i; defaults to interval
            midpoints of the cumulative deltas.

    Returns:
        (pixel (..., C), depth (...), opacity (...)).
    """
    deltas = torch.as_tensor(deltas, dtype=densities.dtype, device=densities.device)
    deltas = torch.broadcast_to(deltas, densities.shape)
    alpha = 1.0 - torch.exp(-densities * deltas)
    keep = torch.cumprod(1.0 - alpha, dim=-1)
    trans = torch.cat([torch.ones_like(keep[..., :1]), keep[..., :-1]], dim=-1)
    weights = trans * alpha  # (..., S)
    pixel = (weights.unsqueeze(-1) * colors).sum(dim=-2)
    opacity = 1.0 - keep[..., -1]
    if distances is None:
        cum = torch.cumsum(deltas, dim=-1)
        distances = cum - deltas / 2
    depth = (weights * distances).sum(dim=-1) / opacity.clamp(min=eps)
    return pixel, depth, opacity


def stratified_distances(
    near: float,
    far: float,
    steps: int,
    prefix_shape: tuple[int, ...],
    generator: Optional[torch.Generator] = None,
    dtype: torch.dtype = torch.float32,
    device=None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample distances in [near, far]: one jittered point per uniform bin.

    Without a generator the bin midpoints are used. Deltas are the bin
    widths, so they always sum to far - near.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    width = (far - near) / steps
    starts = near + torch.arange(steps, dtype=dtype, device=device) * width
    if generator is None:
        offsets = torch.full(prefix_shape + (steps,), 0.5, dtype=dtype, device=device)
    else:
        offsets = torch.rand(prefix_shape + (steps,), generator=generator, dtype=dtype, device=device)
    distances = starts + offsets * width
    deltas = torch.full_like(distances, width)
    return distances, deltas


# A field maps (M, 3) world points to (density (M,), color (M, 3)) and
# optionally a feature vector (M, F); used to render analytic scenes
# without a tri-plane or decoder.
FieldFn = Callable[[torch.Tensor], tuple]


def _render_ray_batch(
    origins: torch.Tensor,  # (B, N, 3)
    directions: torch.Tensor,  # (B, N, 3)
    near: float,
    far: float,
    steps: int,
    sample_fn: Callable[[torch.Tensor], tuple],
    generators: Optional[Sequence[Optional[torch.Generator]]],
    dtype: torch.dtype,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Core ray-marching loop shared by the tri-plane and field renderers.

    sample_fn maps (B, P, 3) points to (density (B, P), color (B, P, 3),
    features (B, P, F)). Returns flat per-ray rgb/feat/depth/opacity.
    """
    b, n, _ = origins.shape
    dists = []
    deltas = []
    for i in range(b):
        gen = generators[i] if generators is not None else None
        d, dl = stratified_distances(near, far, steps, (n,), generator=gen, dtype=dtype, device=origins.device)
        dists.append(d)
        deltas.append(dl)
    dist = torch.stack(dists)  # (B, N, S)
    delta = torch.stack(deltas)
    o = origins.to(dtype)
    d = directions.to(dtype)
    points = o.unsqueeze(2) + d.unsqueeze(2) * dist.unsqueeze(-1)  # (B, N, S, 3)
    density, color, feats = sample_fn(points.reshape(b, n * steps, 3))
    density = density.reshape(b, n, steps)
    channels = torch.cat([color, feats], dim=-1).reshape(b, n, steps, -1)
    pixel, depth, opacity = composite(density, channels, delta, distances=dist)
    rgb = pixel[..., :3]
    features = pixel[..., 3:]
    return rgb, features, depth, opacity


def render_planes_batch(
    planes: torch.Tensor,  # (B, 3, C, R, R)
    bounds: float,
    decoder: RadianceDecoder,
    poses: Sequence[CameraPose],
    resolution: int,
    near: float,
    far: float,
    steps: int,
    seeds: Optional[Sequence[Optional[int]]] = None,
) -> RenderOutput:
    """Render one frame per batched tri-plane; outputs are stacked (B, H, W, .).

    seeds fixes the stratification jitter per batch element; None entries
    (or seeds=None) use deterministic bin midpoints.
    """
    b = planes.shape[0]
    if len(poses) != b:
        raise ValueError("one pose per batched plane set is required")
    origins = []
    directions = []
    for pose in poses:
        rays = generate_rays(pose, resolution, near, far)
        origins.append(rays.origins)
        directions.append(rays.directions)
    origins_t = torch.stack(origins).to(planes.device)
    directions_t = torch.stack(directions).to(planes.device)
    generators = None
    if seeds is not None:
        generators = []
        for s in seeds:
            if s is None:
                generators.append(None)
            else:
                gen = torch.Generator(device="cpu")
                gen.manual_seed(int(s))
                generators.append(gen)

    def sample_fn(points):
        feats = sample_planes_batch(planes, points, bounds)
        return decoder(feats)

    rgb, features, depth, opacity = _render_ray_batch(
        origins_t, directions_t, near, far, steps, sample_fn, generators, planes.dtype
    )
    h = w = resolution
    return RenderOutput(
        rgb=rgb.reshape(b, h, w, 3),
        depth=depth.reshape(b, h, w),
        opacity=opacity.reshape(b, h, w),
        features=features.reshape(b, h, w, -1),
    )


def render(
    triplane: TriPlane,
    rays: RayBundle,
    steps: int,
    decoder: RadianceDecoder,
    seed: Optional[int] = None,
) -> RenderOutput:
    """Volume-render a single tri-plane scene through a ray bundle."""
    res = rays.resolution
    generator = None
    if seed is not None:
        generator = torch.Generator(device="cpu")
        generator.manual_seed(int(seed))
    dtype = triplane.planes.dtype

    def sample_fn(points):
        feats = sample_planes_batch(triplane.planes.unsqueeze(0), points, triplane.bounds)
        return decoder(feats)

    rgb, features, depth, opacity = _render_ray_batch(
        rays.origins.unsqueeze(0),
        rays.directions.unsqueeze(0),
        rays.near,
        rays.far,
        steps,
        sample_fn,
        [generator],
        dtype,
    )
    return RenderOutput(
        rgb=rgb.reshape(res, res, 3),
        depth=depth.reshape(res, res),
        opacity=opacity.reshape(res, res),
        features=features.reshape(res, res, -1),
    )


def render_field(
    field: FieldFn,
    rays: RayBundle,
    steps: int,
    seed: Optional[int] = None,
    dtype: torch.dtype = torch.float64,
) -> RenderOutput:
    """Render an analytic density/color field instead of a tri-plane.

    The field receives (M, 3) points and returns (density, color) or
    (density, color, features); with two outputs the color doubles as the
    feature vector. This is the injection point for synthetic test scenes
    and procedurally generated datasets.
    """
    res = rays.resolution
    generator = None
    if seed is not None:
        generator = torch.Generator(device="cpu")
        generator.manual_seed(int(seed))

    def sample_fn(points):
        pts = points.reshape(-1, 3)
        out = field(pts)
        if len(out) == 2:
            density, color = out
            feats = color
        else:
            density, color, feats = out
        m = pts.shape[0]
        return density.reshape(1, m), color.reshape(1, m, 3), feats.reshape(1, m, -1)

    rgb, features, depth, opacity = _render_ray_batch(
        rays.origins.unsqueeze(0),
        rays.directions.unsqueeze(0),
        rays.near,
        rays.far,
        steps,
        sample_fn,
        [generator],
        dtype,
    )
    return RenderOutput(
        rgb=rgb.reshape(res, res, 3),
        depth=depth.reshape(res, res),
        opacity=opacity.reshape(res, res),
        features=features.reshape(res, res, -1),
    )

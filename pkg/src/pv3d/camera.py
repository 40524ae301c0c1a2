"""Camera poses, ray generation, pose-sequence smoothing, and orbit cameras.

A pose is a 4x4 camera-to-world extrinsic plus a 3x3 intrinsic normalized by
image size, serialized flat as 25 values (16 extrinsic row-major, then 9
intrinsic row-major). Normalized intrinsics let one pose file drive rendering
at any resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

POSE_DIM = 25

_ORTHO_TOL = 1e-5
_BOTTOM_ROW_TOL = 1e-6


class PoseFormatError(ValueError):
    """Flat pose vector or pose file line has the wrong layout."""


class PoseValidationError(ValueError):
    """Pose entries violate the camera invariants."""


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Pinhole camera: camera-to-world extrinsic, size-normalized intrinsic.

    The camera looks along its +z axis; pixel (u, v) in [0, 1]^2 unprojects
    to direction K^-1 (u, v, 1) in camera space.
    """

    extrinsic: torch.Tensor  # (4, 4) float64, camera-to-world
    intrinsic: torch.Tensor  # (3, 3) float64, normalized by image size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CameraPose):
            return NotImplemented
        return torch.equal(self.extrinsic, other.extrinsic) and torch.equal(
            self.intrinsic, other.intrinsic
        )

    @property
    def rotation(self) -> torch.Tensor:
        return self.extrinsic[:3, :3]

    @property
    def center(self) -> torch.Tensor:
        """Camera center in world coordinates."""
        return self.extrinsic[:3, 3]

    def flatten(self) -> torch.Tensor:
        """25-vector: extrinsic row-major then intrinsic row-major."""
        return torch.cat([self.extrinsic.reshape(-1), self.intrinsic.reshape(-1)])

    def validate(self) -> None:
        """Raise PoseValidationError if any invariant is violated."""
        ext, intr = self.extrinsic, self.intrinsic
        if ext.shape != (4, 4) or intr.shape != (3, 3):
            raise PoseValidationError("pose matrices have wrong shape")
        if not (torch.isfinite(ext).all() and torch.isfinite(intr).all()):
            raise PoseValidationError("pose contains non-finite entries")
        bottom = ext[3]
        expected = torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=ext.dtype)
        if (bottom - expected).abs().max() > _BOTTOM_ROW_TOL:
            raise PoseValidationError(f"extrinsic bottom row is {bottom.tolist()}, expected (0,0,0,1)")
        r = ext[:3, :3]
        err = (r.T @ r - torch.eye(3, dtype=ext.dtype)).abs().max().item()
        if err > _ORTHO_TOL:
            raise PoseValidationError(f"rotation orthonormality error {err:.3e} exceeds {_ORTHO_TOL}")
        lower = torch.tensor([intr[1, 0], intr[2, 0], intr[2, 1]])
        if lower.abs().max() > _BOTTOM_ROW_TOL:
            raise PoseValidationError("intrinsic is not upper-triangular")
        if intr[0, 0] <= 0 or intr[1, 1] <= 0:
            raise PoseValidationError("intrinsic focal entries must be positive")


@dataclass(frozen=True)
class RayBundle:
    """One ray per pixel center, row-major over a square image."""

    origins: torch.Tensor  # (N, 3) world units
    directions: torch.Tensor  # (N, 3) unit norm
    near: float
    far: float

    @property
    def resolution(self) -> int:
        n = self.origins.shape[0]
        res = int(round(math.sqrt(n)))
        if res * res != n:
            raise ValueError(f"ray count {n} is not a square image")
        return res


def parse_pose(flat) -> CameraPose:
    """Build a validated CameraPose from 25 flat values.

    Raises:
        PoseFormatError: wrong length or non-finite values.
        PoseValidationError: layout is right but invariants fail.
    """
    values = torch.as_tensor(flat, dtype=torch.float64).reshape(-1)
    if values.numel() != POSE_DIM:
        raise PoseFormatError(f"expected {POSE_DIM} values, got {values.numel()}")
    if not torch.isfinite(values).all():
        raise PoseFormatError("pose values must be finite")
    pose = CameraPose(values[:16].reshape(4, 4), values[16:].reshape(3, 3))
    pose.validate()
    return pose


def serialize_pose(pose: CameraPose) -> torch.Tensor:
    """Inverse of parse_pose; 25-vector, bit-identical round trip."""
    return pose.flatten()


def generate_rays(pose: CameraPose, resolution: int, near: float, far: float) -> RayBundle:
    """One ray per pixel center, unprojected through the intrinsic.

    Origins all equal the camera center; directions are unit norm, computed
    as R @ K^-1 (u, v, 1) for pixel centers (u, v) in normalized image
    coordinates, row-major.
    """
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    if near >= far:
        raise ValueError(f"near ({near}) must be < far ({far})")
    centers = (torch.arange(resolution, dtype=torch.float64) + 0.5) / resolution
    v, u = torch.meshgrid(centers, centers, indexing="ij")
    pix = torch.stack([u.reshape(-1), v.reshape(-1), torch.ones(resolution * resolution, dtype=torch.float64)], dim=-1)
    k_inv = torch.linalg.inv(pose.intrinsic)
    dirs_cam = pix @ k_inv.T
    dirs = dirs_cam @ pose.rotation.T
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    origins = pose.center.expand_as(dirs).contiguous()
    return RayBundle(origins=origins, directions=dirs, near=float(near), far=float(far))


def smooth_pose_sequence(poses: Sequence[CameraPose], sigma: float) -> list[CameraPose]:
    """Low-pass each flat pose channel with a truncated Gaussian.

    Kernel is truncated at +-3 sigma, normalized, applied with edge
    replication; the rotation block is then projected back onto the nearest
    rotation matrix.
    """
    if len(poses) == 0:
        raise ValueError("pose sequence must be non-empty")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    flats = np.stack([p.flatten().numpy() for p in poses])  # (T, 25)
    radius = max(1, int(math.ceil(3.0 * sigma)))
    taps = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (taps / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(flats, ((radius, radius), (0, 0)), mode="edge")
    smoothed = np.stack(
        [np.convolve(padded[:, c], kernel, mode="valid") for c in range(flats.shape[1])],
        axis=1,
    )
    out = []
    for row in smoothed:
        ext = torch.from_numpy(row[:16].reshape(4, 4).copy())
        ext[:3, :3] = _nearest_rotation(ext[:3, :3])
        ext[3] = torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=torch.float64)
        pose = CameraPose(ext, torch.from_numpy(row[16:].reshape(3, 3).copy()))
        pose.validate()
        out.append(pose)
    return out


def _nearest_rotation(m: torch.Tensor) -> torch.Tensor:
    """Nearest rotation in Frobenius norm, det +1."""
    u, _, vt = torch.linalg.svd(m)
    r = u @ vt
    if torch.linalg.det(r) < 0:
        u = u.clone()
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def yaw_pose(yaw_degrees: float, reference: CameraPose) -> CameraPose:
    """Rotate the camera about the vertical world axis (+y) by yaw_degrees.

    The camera center stays on its orbit radius; a reference aimed at the
    world origin stays aimed at the origin. Intrinsics are copied.
    """
    theta = math.radians(yaw_degrees)
    c, s = math.cos(theta), math.sin(theta)
    rot = torch.eye(4, dtype=torch.float64)
    rot[0, 0] = c
    rot[0, 2] = s
    rot[2, 0] = -s
    rot[2, 2] = c
    return CameraPose(rot @ reference.extrinsic, reference.intrinsic.clone())


def orbit_pose(
    yaw_degrees: float = 0.0,
    pitch_degrees: float = 0.0,
    radius: float = 2.7,
    focal: float = 2.4,
    principal: tuple[float, float] = (0.5, 0.5),
) -> CameraPose:
    """Camera on a sphere of the given radius, aimed at the world origin.

    Yaw 0 / pitch 0 places the camera on the +z axis; yaw rotates about +y.
    """
    yaw = math.radians(yaw_degrees)
    pitch = math.radians(pitch_degrees)
    center = torch.tensor(
        [
            radius * math.sin(yaw) * math.cos(pitch),
            radius * math.sin(pitch),
            radius * math.cos(yaw) * math.cos(pitch),
        ],
        dtype=torch.float64,
    )
    forward = -center / center.norm()
    world_up = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    if float(torch.cross(world_up, forward, dim=0).norm()) < 1e-8:
        raise ValueError("camera axis is parallel to the vertical axis")
    right = torch.cross(world_up, forward, dim=0)
    right = right / right.norm()
    up = torch.cross(forward, right, dim=0)
    ext = torch.eye(4, dtype=torch.float64)
    ext[:3, 0] = right
    ext[:3, 1] = up
    ext[:3, 2] = forward
    ext[:3, 3] = center
    intr = torch.tensor(
        [[focal, 0.0, principal[0]], [0.0, focal, principal[1]], [0.0, 0.0, 1.0]],
        dtype=torch.float64,
    )
    return CameraPose(ext, intr)


def project_points(pose: CameraPose, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Project world points into normalized pixel coordinates.

    Returns:
        (M, 2) normalized pixel coordinates and (M,) camera-space depths
        (distance along the optical axis; points behind the camera get
        negative depth).
    """
    pts = torch.as_tensor(points, dtype=torch.float64)
    cam = (pts - pose.center) @ pose.rotation  # R^T (X - t) per row
    z = cam[:, 2]
    safe_z = torch.where(z.abs() < 1e-12, torch.full_like(z, 1e-12), z)
    proj = cam / safe_z.unsqueeze(-1)
    uv = proj @ pose.intrinsic.T
    return uv[:, :2], z


def load_pose_file(path) -> list[CameraPose]:
    """Read one pose per line: 25 whitespace-separated reals; '#' comments."""
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = stripped.split()
        if len(fields) != POSE_DIM:
            raise PoseFormatError(f"{path}:{lineno}: expected {POSE_DIM} fields, got {len(fields)}")
        try:
            values = [float(f) for f in fields]
        except ValueError as exc:
            raise PoseFormatError(f"{path}:{lineno}: {exc}") from exc
        poses.append(parse_pose(values))
    return poses


def save_pose_file(path, poses: Sequence[CameraPose]) -> None:
    """Write poses in the load_pose_file format with full float precision."""
    lines = []
    for pose in poses:
        values = pose.flatten().tolist()
        lines.append(" ".join(repr(v) for v in values))
    Path(path).write_text("\n".join(lines) + "\n")

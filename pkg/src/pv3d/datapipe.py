"""Dataset layout, clip loading, preprocessing logic, and synthetic data.

Dataset layout on disk:

    <root>/<clip_id>/frame_00000.png ...   aligned RGB frames
    <root>/<clip_id>/poses.txt             camera pose per frame
    <root>/manifest.json                   optional {clip_id: {identity, resolution}}

Embedding files for preprocessing: `<clip_id>.emb` (a single line, the clip
embedding) and `<clip_id>.frames.emb` (one line per sampled frame),
whitespace-separated floats.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy.cluster.hierarchy import fcluster, linkage

from . import camera
from .renderer import render_field


class DataError(Exception):
    """A clip or its side files are missing, malformed, or inconsistent."""


@dataclass(frozen=True)
class ClipRecord:
    """One video clip: ordered frame files plus a matching pose file."""

    clip_id: str
    frame_paths: tuple[Path, ...]
    pose_path: Path
    identity: Optional[str] = None
    resolution: Optional[int] = None

    @property
    def frame_count(self) -> int:
        return len(self.frame_paths)


def scan_dataset(root) -> list[ClipRecord]:
    """Discover clips under a dataset root; sorted by clip id."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    manifest = {}
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"unreadable manifest {manifest_path}: {exc}") from exc
    records = []
    for clip_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        pose_path = clip_dir / "poses.txt"
        if not pose_path.exists():
            continue
        frames = tuple(sorted(clip_dir.glob("frame_*.png")))
        if not frames:
            raise DataError(f"clip {clip_dir.name} has a pose file but no frames")
        info = manifest.get(clip_dir.name, {})
        records.append(
            ClipRecord(
                clip_id=clip_dir.name,
                frame_paths=frames,
                pose_path=pose_path,
                identity=info.get("identity"),
                resolution=info.get("resolution"),
            )
        )
    return records


def load_clip(record: ClipRecord, indices: Sequence[int]) -> tuple[torch.Tensor, list[camera.CameraPose]]:
    """Decode the requested frames and their pose lines.

    Returns float RGB frames (n, 3, H, W) in [0, 1] and matching poses, in
    the requested order.
    """
    try:
        poses = camera.load_pose_file(record.pose_path)
    except (OSError, camera.PoseFormatError, camera.PoseValidationError) as exc:
        raise DataError(f"clip {record.clip_id}: bad pose file: {exc}") from exc
    if len(poses) != record.frame_count:
        raise DataError(
            f"clip {record.clip_id}: {len(poses)} pose lines for {record.frame_count} frames"
        )
    frames = []
    picked = []
    for idx in indices:
        if not 0 <= idx < record.frame_count:
            raise DataError(f"clip {record.clip_id}: frame index {idx} out of range")
        path = record.frame_paths[idx]
        try:
            with Image.open(path) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise DataError(f"clip {record.clip_id}: cannot read {path}: {exc}") from exc
        frames.append(torch.from_numpy(arr).permute(2, 0, 1))
        picked.append(poses[idx])
    return torch.stack(frames), picked


def cluster_identities(embeddings: Mapping[str, np.ndarray], linkage_threshold: float) -> dict[str, int]:
    """Group clips into pseudo-identities by embedding similarity.

    Average-linkage agglomerative clustering on cosine distance, cut at
    linkage_threshold. Returns a cluster label per clip id.
    """
    if not embeddings:
        raise ValueError("at least one embedding is required")
    ids = sorted(embeddings)
    if len(ids) == 1:
        return {ids[0]: 1}
    matrix = np.stack([np.asarray(embeddings[i], dtype=np.float64) for i in ids])
    z = linkage(matrix, method="average", metric="cosine")
    labels = fcluster(z, t=linkage_threshold, criterion="distance")
    return {cid: int(label) for cid, label in zip(ids, labels)}


def balance_identities(
    embeddings: Mapping[str, np.ndarray],
    linkage_threshold: float,
    max_per_identity: int = 2,
    resolutions: Optional[Mapping[str, int]] = None,
) -> list[str]:
    """Cluster clip embeddings into pseudo-identities and cap each cluster.

    Within each cluster, clips are kept highest resolution first, ties
    broken by lexicographic clip id.
    """
    labels = cluster_identities(embeddings, linkage_threshold)
    by_cluster: dict[int, list[str]] = {}
    for cid, label in labels.items():
        by_cluster.setdefault(label, []).append(cid)
    selected = []
    for members in by_cluster.values():
        if resolutions:
            members.sort(key=lambda cid: (-resolutions.get(cid, 0), cid))
        else:
            members.sort()
        selected.extend(members[:max_per_identity])
    return sorted(selected)


def verify_clip(
    frame_embeddings,
    threshold: float = 0.5,
    max_noisy: int = 2,
) -> tuple[bool, list[int]]:
    """Flag noisy frames by mean cosine similarity to the other frames.

    A frame is noisy when its mean similarity to all other sampled frames
    falls below the threshold; the clip is discarded when more than
    max_noisy frames are noisy.

    Returns:
        (keep, noisy_frame_indices)
    """
    emb = np.asarray(frame_embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ValueError("at least two frame embeddings are required")
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    unit = emb / norms
    sims = unit @ unit.T
    n = emb.shape[0]
    mean_to_others = (sims.sum(axis=1) - 1.0) / (n - 1)
    noisy = [int(i) for i in np.flatnonzero(mean_to_others < threshold)]
    return len(noisy) <= max_noisy, noisy


def load_embedding_file(path) -> np.ndarray:
    """Read one whitespace-separated vector per line; (n, D) array."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append([float(v) for v in line.split()])
    if not rows:
        raise DataError(f"embedding file {path} is empty")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DataError(f"embedding file {path} has ragged rows")
    return np.asarray(rows, dtype=np.float64)


@dataclass
class SyntheticDataConfig:
    """Procedural dataset of textured pulsing ellipsoids under camera orbits."""

    n_clips: int = 8
    frames_per_clip: int = 16
    resolution: int = 64
    render_steps: int = 48
    radius: float = 2.7
    focal: float = 2.4
    near: float = 2.0
    far: float = 3.4
    fps: int = 25


def _ellipsoid_field(axes: np.ndarray, color_phase: np.ndarray, color_freq: float, sigma0: float = 200.0):
    ax = torch.from_numpy(axes)
    phase = torch.from_numpy(color_phase)

    def field(pts: torch.Tensor):
        q = ((pts / ax) ** 2).sum(dim=-1)
        density = sigma0 * torch.sigmoid((1.0 - q) / 0.02)
        color = 0.5 + 0.45 * torch.sin(color_freq * pts * math.pi + phase)
        return density, color.clamp(0.0, 1.0)

    return field


def make_synthetic_dataset(out_dir, config: SyntheticDataConfig, seed: int = 0) -> list[ClipRecord]:
    """Render a small labeled dataset in the standard layout.

    Each clip is one identity: an ellipsoid with its own texture phase whose
    axes pulse over time (the motion), filmed by a smooth yaw orbit. Frames,
    exact pose files, and a manifest are written under out_dir. Regeneration
    with the same seed is bitwise identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    manifest = {}
    records = []
    for clip_idx in range(config.n_clips):
        clip_id = f"clip_{clip_idx:04d}"
        clip_dir = out / clip_id
        clip_dir.mkdir(exist_ok=True)
        base_axes = rng.uniform(0.18, 0.3, size=3)
        pulse_amp = rng.uniform(0.1, 0.25, size=3)
        pulse_phase = rng.uniform(0, 1, size=3)
        color_phase = rng.uniform(0, 2 * math.pi, size=3)
        color_freq = rng.uniform(2.0, 5.0)
        yaw_start = rng.uniform(-35.0, 0.0)
        yaw_end = yaw_start + rng.uniform(15.0, 35.0)
        pitch = rng.uniform(-8.0, 8.0)
        poses = []
        frame_paths = []
        for f in range(config.frames_per_clip):
            t = f / (config.frames_per_clip - 1)
            axes = base_axes * (1.0 + pulse_amp * np.sin(2 * math.pi * (t + pulse_phase)))
            yaw = yaw_start + (yaw_end - yaw_start) * t
            pose = camera.orbit_pose(yaw, pitch, radius=config.radius, focal=config.focal)
            rays = camera.generate_rays(pose, config.resolution, config.near, config.far)
            rendered = render_field(
                _ellipsoid_field(axes, color_phase, color_freq),
                rays,
                steps=config.render_steps,
            )
            rgb = rendered.rgb + (1.0 - rendered.opacity).unsqueeze(-1) * 0.12
            img = (rgb.clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
            path = clip_dir / f"frame_{f:05d}.png"
            Image.fromarray(img).save(path)
            frame_paths.append(path)
            poses.append(pose)
        camera.save_pose_file(clip_dir / "poses.txt", poses)
        manifest[clip_id] = {"identity": f"synth_{clip_idx:04d}", "resolution": config.resolution}
        records.append(
            ClipRecord(
                clip_id=clip_id,
                frame_paths=tuple(frame_paths),
                pose_path=clip_dir / "poses.txt",
                identity=manifest[clip_id]["identity"],
                resolution=config.resolution,
            )
        )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return records

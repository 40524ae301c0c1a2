"""Contiguous video synthesis and free-viewpoint rendering.

Camera-sharing strategies at inference:

    All  - every frame maps and renders with the first camera.
    Non  - every frame maps and renders with its own camera.
    Map  - the mapping network always sees the first camera; rendering is
           per frame.
    MapT - trained with per-frame cameras everywhere, but shares the first
           camera in the mapping network at inference (same as Map here),
           which keeps the mapped appearance code constant over time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .camera import CameraPose, orbit_pose, save_pose_file, yaw_pose
from .generator import CAMERA_MODES, Generator


@dataclass
class VideoClip:
    """Ordered frames with per-frame timesteps and camera poses."""

    frames: torch.Tensor  # (N, 3, H, W) in [0, 1]
    timesteps: list[float]
    poses: list[CameraPose]
    fps: int = 25
    mode: str = "MapT"
    extrapolated: bool = False  # any timestep beyond the trained range

    def __post_init__(self):
        n = self.frames.shape[0]
        if len(self.timesteps) != n or len(self.poses) != n:
            raise ValueError("frames, timesteps, and poses must have equal lengths")
        if any(b <= a for a, b in zip(self.timesteps, self.timesteps[1:])):
            raise ValueError("timesteps must be strictly increasing")


def _frame_seed(base_seed: int, index: int) -> int:
    # every frame of a clip shares one jitter pattern: re-rendering any
    # frame is bitwise reproducible, and scenes that do not change over
    # time produce bitwise-identical frames
    del index
    return int(base_seed)


def synthesize_video(
    generator: Generator,
    z_a: torch.Tensor,
    z_m: torch.Tensor,
    camera_seq: Sequence[CameraPose],
    n_frames: int,
    mode: Optional[str] = None,
    steps: int = 48,
    base_seed: int = 0,
    fps: int = 25,
) -> VideoClip:
    """Render n_frames at timesteps i / (max_frames - 1).

    The stratification seed is fixed per frame index, so any frame can be
    re-rendered bitwise identically.
    """
    if len(camera_seq) != n_frames:
        raise ValueError(f"camera_seq has {len(camera_seq)} poses for {n_frames} frames")
    mode = mode or generator.config.camera_mode
    if mode not in CAMERA_MODES:
        raise ValueError(f"mode must be one of {CAMERA_MODES}")
    timesteps = [generator.config.timestep(i) for i in range(n_frames)]
    if mode == "All":
        map_poses = [camera_seq[0]] * n_frames
        render_poses = [camera_seq[0]] * n_frames
    elif mode == "Non":
        map_poses = list(camera_seq)
        render_poses = list(camera_seq)
    else:  # Map and MapT share the mapping camera at inference
        map_poses = [camera_seq[0]] * n_frames
        render_poses = list(camera_seq)
    z_a = torch.as_tensor(z_a).reshape(1, -1)
    z_m = torch.as_tensor(z_m).reshape(1, -1)
    shared_mapping = mode != "Non"
    with torch.no_grad():
        if shared_mapping:
            w_shared = generator.map_appearance(z_a, map_poses[0])
        frames = []
        for i in range(n_frames):
            w_plus = w_shared if shared_mapping else generator.map_appearance(z_a, map_poses[i])
            motion = generator.motion_codes(z_m, torch.tensor([timesteps[i]]))
            frame, _ = generator.generate_frames(
                w_plus,
                motion,
                [render_poses[i]],
                steps,
                seeds=[_frame_seed(base_seed, i)],
            )
            frames.append(frame[0])
    return VideoClip(
        frames=torch.stack(frames),
        timesteps=timesteps,
        poses=render_poses,
        fps=fps,
        mode=mode,
        extrapolated=any(t > 1.0 for t in timesteps),
    )


def synthesize_video_from_wplus(
    generator: Generator,
    w_plus: torch.Tensor,
    z_m: torch.Tensor,
    camera_seq: Sequence[CameraPose],
    n_frames: int,
    steps: int = 48,
    base_seed: int = 0,
    fps: int = 25,
    z_m_per_frame: Optional[Sequence[torch.Tensor]] = None,
) -> VideoClip:
    """Drive a video from fixed per-layer appearance codes.

    Bypasses the mapping network entirely (the per-layer codes already
    embed an identity), renders each frame with its own camera. Per-frame
    motion latents override the shared z_m when supplied.
    """
    if len(camera_seq) != n_frames:
        raise ValueError(f"camera_seq has {len(camera_seq)} poses for {n_frames} frames")
    w = torch.as_tensor(w_plus)
    if w.ndim == 2:
        w = w.unsqueeze(0)
    timesteps = [generator.config.timestep(i) for i in range(n_frames)]
    frames = []
    with torch.no_grad():
        for i in range(n_frames):
            zm_i = z_m if z_m_per_frame is None else z_m_per_frame[i]
            motion = generator.motion_codes(torch.as_tensor(zm_i).reshape(1, -1), torch.tensor([timesteps[i]]))
            frame, _ = generator.generate_frames(
                w, motion, [camera_seq[i]], steps, seeds=[_frame_seed(base_seed, i)]
            )
            frames.append(frame[0])
    return VideoClip(
        frames=torch.stack(frames),
        timesteps=timesteps,
        poses=list(camera_seq),
        fps=fps,
        mode="MapT",
        extrapolated=any(t > 1.0 for t in timesteps),
    )


def freeview_render(
    generator: Generator,
    z_a: torch.Tensor,
    z_m: torch.Tensor,
    t: float,
    orbit: Sequence[float],
    reference_pose: Optional[CameraPose] = None,
    steps: int = 48,
    seed: int = 0,
) -> list[torch.Tensor]:
    """Freeze the scene at timestep t and render it from orbit yaw angles.

    The mapping network sees the (frontal) reference pose for every view,
    so all views share one appearance code; only the render camera moves.
    """
    reference = reference_pose or orbit_pose()
    z_a = torch.as_tensor(z_a).reshape(1, -1)
    z_m = torch.as_tensor(z_m).reshape(1, -1)
    with torch.no_grad():
        w_plus = generator.map_appearance(z_a, reference)
        motion = generator.motion_codes(z_m, torch.tensor([float(t)]))
        frames = []
        for yaw in orbit:
            frame, _ = generator.generate_frames(
                w_plus, motion, [yaw_pose(yaw, reference)], steps, seeds=[seed]
            )
            frames.append(frame[0])
    return frames


def export_clip(clip: VideoClip, out_dir) -> Path:
    """Write numbered PNG frames, a pose file, and clip metadata."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(clip.frames.shape[0]):
        arr = (clip.frames[i].clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
        Image.fromarray(arr).save(out / f"frame_{i:05d}.png")
    save_pose_file(out / "poses.txt", clip.poses)
    meta = {
        "fps": clip.fps,
        "timesteps": clip.timesteps,
        "mode": clip.mode,
        "extrapolated": clip.extrapolated,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out

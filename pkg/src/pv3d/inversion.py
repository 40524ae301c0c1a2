"""Latent optimization against a frozen generator.

Static portraits invert into the per-layer appearance-code space at the
first timestep; videos additionally recover one motion latent per frame
with the appearance codes frozen. Replacing the recovered motion latents
with a fresh draw drives the inverted identity with new motion.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .camera import CameraPose
from .generator import Generator
from .inference import VideoClip, synthesize_video_from_wplus

_RENDER_SEED = 0  # shared with frame 0 of driven clips so stills reproduce


class InversionDivergedError(RuntimeError):
    """Reconstruction loss exploded; carries the loss trace."""

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


@dataclass
class OptConfig:
    """Latent-optimization settings shared by image and video inversion.

    `perceptual`, when set, must be a differentiable torch callable mapping
    a (3, H, W) frame to a feature tensor; it joins the pixel loss with
    weight perceptual_weight. Out-of-process extractors cannot backpropagate
    and are not accepted here.
    """

    steps: int = 500
    lr: float = 0.05
    w_avg_samples: int = 1000
    render_steps: int = 24
    motion_steps: Optional[int] = None  # defaults to `steps`
    perceptual: Optional[callable] = None
    perceptual_weight: float = 0.0
    divergence_factor: float = 10.0
    divergence_patience: int = 50
    seed: int = 0


@dataclass
class InversionResult:
    """Recovered codes plus the per-iteration reconstruction losses."""

    w_plus: torch.Tensor  # (L, style_dim)
    z_m_per_frame: Optional[list[torch.Tensor]]
    losses: list[float]
    frame_losses: Optional[list[list[float]]] = None


def mean_w_plus(generator: Generator, pose: CameraPose, n_samples: int = 1000, seed: int = 0) -> torch.Tensor:
    """Empirical mean of mapped per-layer codes over random appearance draws."""
    gen = torch.Generator().manual_seed(seed)
    total = None
    chunk = 256
    remaining = n_samples
    with torch.no_grad():
        while remaining > 0:
            n = min(chunk, remaining)
            z = torch.randn(n, generator.config.z_dim_appearance, generator=gen)
            w = generator.map_appearance(z, pose)
            total = w.sum(dim=0) if total is None else total + w.sum(dim=0)
            remaining -= n
    return total / n_samples


def _reconstruction_loss(
    generated: torch.Tensor, target: torch.Tensor, opt: OptConfig
) -> torch.Tensor:
    loss = torch.mean((generated - target) ** 2)
    if opt.perceptual is not None and opt.perceptual_weight > 0:
        g_feat = opt.perceptual(generated)
        with torch.no_grad():
            t_feat = opt.perceptual(target)
        loss = loss + opt.perceptual_weight * torch.mean((g_feat - t_feat) ** 2)
    return loss


def _check_divergence(trace: list[float], opt: OptConfig) -> None:
    if len(trace) < opt.divergence_patience + 1:
        return
    initial = trace[0]
    recent = trace[-opt.divergence_patience :]
    if all(v > opt.divergence_factor * max(initial, 1e-12) for v in recent):
        raise InversionDivergedError(
            f"loss exceeded {opt.divergence_factor}x the initial value for "
            f"{opt.divergence_patience} consecutive steps",
            trace,
        )


def invert_image(
    target: torch.Tensor,
    pose: CameraPose,
    generator: Generator,
    opt: OptConfig,
) -> InversionResult:
    """Optimize per-layer appearance codes to reproduce a still at t = 0.

    The generator is frozen; codes start at the empirical mean of mapped
    codes. Returns the codes and the full loss trace.
    """
    target = torch.as_tensor(target, dtype=torch.float32)
    r = generator.config.final_resolution
    if target.shape != (3, r, r):
        raise ValueError(f"target must be (3, {r}, {r}), got {tuple(target.shape)}")
    was_training = generator.training
    generator.eval()
    for p in generator.parameters():
        p.requires_grad_(False)
    w_plus = mean_w_plus(generator, pose, opt.w_avg_samples, seed=opt.seed).clone().requires_grad_(True)
    z_m_zero = torch.zeros(generator.config.z_dim_motion)
    optimizer = torch.optim.Adam([w_plus], lr=opt.lr)
    trace: list[float] = []
    for _ in range(opt.steps):
        motion = generator.motion_codes(z_m_zero, torch.tensor([0.0]))
        frames, _ = generator.generate_frames(
            w_plus.unsqueeze(0), motion, [pose], opt.render_steps, seeds=[_RENDER_SEED]
        )
        loss = _reconstruction_loss(frames[0], target, opt)
        trace.append(float(loss.detach()))
        _check_divergence(trace, opt)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    for p in generator.parameters():
        p.requires_grad_(True)
    if was_training:
        generator.train()
    return InversionResult(w_plus=w_plus.detach().clone(), z_m_per_frame=None, losses=trace)


def invert_video(
    frames: torch.Tensor,
    poses: Sequence[CameraPose],
    generator: Generator,
    opt: OptConfig,
) -> InversionResult:
    """Two-stage video reconstruction.

    Stage 1 inverts frame 0 for the per-layer appearance codes; stage 2
    freezes them and recovers an independent motion latent per frame at
    that frame's timestep.
    """
    frames = torch.as_tensor(frames, dtype=torch.float32)
    if frames.ndim != 4:
        raise ValueError("frames must be (N, 3, H, W)")
    n = frames.shape[0]
    if len(poses) != n:
        raise ValueError("one pose per frame is required")
    stage1 = invert_image(frames[0], poses[0], generator, opt)
    w_plus = stage1.w_plus
    for p in generator.parameters():
        p.requires_grad_(False)
    motion_steps = opt.motion_steps or opt.steps
    z_m_list: list[torch.Tensor] = []
    frame_losses: list[list[float]] = []
    for i in range(n):
        t = generator.config.timestep(i)
        z_m = torch.zeros(generator.config.z_dim_motion, requires_grad=True)
        optimizer = torch.optim.Adam([z_m], lr=opt.lr)
        trace: list[float] = []
        for _ in range(motion_steps):
            motion = generator.motion_codes(z_m.unsqueeze(0), torch.tensor([t]))
            out, _ = generator.generate_frames(
                w_plus.unsqueeze(0), motion, [poses[i]], opt.render_steps, seeds=[_RENDER_SEED]
            )
            loss = _reconstruction_loss(out[0], frames[i], opt)
            trace.append(float(loss.detach()))
            _check_divergence(trace, opt)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
        z_m_list.append(z_m.detach().clone())
        frame_losses.append(trace)
    for p in generator.parameters():
        p.requires_grad_(True)
    return InversionResult(
        w_plus=w_plus,
        z_m_per_frame=z_m_list,
        losses=stage1.losses,
        frame_losses=frame_losses,
    )


def animate(
    w_plus: torch.Tensor,
    z_m_new: torch.Tensor,
    camera_seq: Sequence[CameraPose],
    generator: Generator,
    n_frames: int,
    steps: int = 24,
) -> VideoClip:
    """Drive inverted appearance codes with a fresh motion latent.

    Frame 0 lands on t = 0, where motion has no effect, so the driven clip
    opens on the inverted still.
    """
    return synthesize_video_from_wplus(
        generator,
        w_plus,
        torch.as_tensor(z_m_new),
        camera_seq,
        n_frames,
        steps=steps,
        base_seed=_RENDER_SEED,
    )


def save_inversion(out_dir, result: InversionResult) -> Path:
    """Archive codes plus a CSV loss trace: inversion.pt and losses.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "w_plus": result.w_plus,
            "z_m_per_frame": result.z_m_per_frame,
        },
        out / "inversion.pt",
    )
    with open(out / "losses.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "frame", "iteration", "loss"])
        for it, v in enumerate(result.losses):
            writer.writerow(["appearance", 0, it, v])
        if result.frame_losses:
            for frame, trace in enumerate(result.frame_losses):
                for it, v in enumerate(trace):
                    writer.writerow(["motion", frame, it, v])
    return out


def load_inversion(path) -> InversionResult:
    payload = torch.load(Path(path) / "inversion.pt", map_location="cpu", weights_only=True)
    return InversionResult(
        w_plus=payload["w_plus"],
        z_m_per_frame=payload["z_m_per_frame"],
        losses=[],
    )

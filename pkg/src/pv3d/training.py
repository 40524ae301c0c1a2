"""Loss computation, timestep/camera sampling, and the GAN training loop.

One step alternates a discriminator update (non-saturating loss over real
and generated frame pairs, with lazy gradient regularization on real
inputs) and a generator update (non-saturating loss plus a density
smoothness term on the generated scenes). Both frames of a generated pair
share one (appearance, motion) latent pair and differ only in timestep and
camera.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .camera import CameraPose
from .checkpoint import save_checkpoint
from .datapipe import ClipRecord, load_clip
from .discriminators import ImageDiscriminator, VideoDiscriminator
from .generator import Generator
from .renderer import RadianceDecoder, sample_planes_batch


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite; carries the offending loss report."""

    def __init__(self, message: str, report: Optional["LossReport"] = None):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    """Training hyperparameters.

    The loss weights default to the VoxCeleb preset (lambda_img 1.0,
    lambda_vid 0.65, lambda_reg 0.6, lambda_r1 2.0); the CelebV-HQ preset
    uses lambda_reg 0.05 with lambda_r1 4.0.
    """

    lambda_reg: float = 0.6
    lambda_vid: float = 0.65
    lambda_img: float = 1.0
    lambda_r1: float = 2.0
    batch_size: int = 4
    iterations: int = 2000
    lr_generator: float = 2.5e-3
    lr_discriminator: float = 2e-3
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    frame_span: int = 16
    beta_alpha: float = 1.0
    beta_beta: float = 2.0
    render_steps: int = 48
    render_resolution: int = 64
    r1_interval: int = 16
    density_points: int = 256
    density_perturb: float = 0.004
    checkpoint_interval: int = 1000
    log_interval: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_reg", "lambda_vid", "lambda_img", "lambda_r1"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.frame_span < 2:
            raise ValueError("frame_span must be >= 2")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size and iterations must be positive")


@dataclass
class LossReport:
    """Per-step losses plus the discriminator logit means used for monitoring."""

    l_img_g: float
    l_vid_g: float
    l_sigma: float
    l_img_d: float
    l_vid_d: float
    l_r1: float
    d_real_logit: float
    d_fake_logit: float

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in dataclasses.astuple(self))

    @classmethod
    def fields(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]


def sample_timestep_pair(
    clip_length: int,
    frame_span: int,
    beta_params: tuple[float, float],
    rng: np.random.Generator,
    max_frames: int = 16,
) -> tuple[int, int, float, float]:
    """Pick an ordered frame pair inside a sliding window of the clip.

    The window start is uniform over valid positions; the index gap is a
    Beta(alpha, beta) draw discretized onto [1, frame_span - 1]. Timesteps
    are index / (max_frames - 1), so frame 0 lands on t = 0.

    Returns:
        (i, j, t_i, t_j) with i < j.
    """
    if clip_length < frame_span:
        raise ValueError(f"clip length {clip_length} is shorter than the frame span {frame_span}")
    start = int(rng.integers(0, clip_length - frame_span + 1))
    u = rng.beta(beta_params[0], beta_params[1])
    gap = 1 + int(u * (frame_span - 1))
    gap = min(gap, frame_span - 1)
    i, j = start, start + gap
    scale = max_frames - 1
    return i, j, i / scale, j / scale


def nonsaturating_losses(real_logit: torch.Tensor, fake_logit: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Non-saturating GAN losses.

    d_loss = softplus(-real) + softplus(fake); g_loss = softplus(-fake).
    Means are taken over any batch dimensions.
    """
    d_loss = F.softplus(-real_logit).mean() + F.softplus(fake_logit).mean()
    g_loss = F.softplus(-fake_logit).mean()
    return d_loss, g_loss


def r1_penalty(score_fn, *real_inputs: torch.Tensor) -> torch.Tensor:
    """Half the mean squared gradient norm of the logit at real inputs.

    Gradients are taken with respect to the image inputs only; pose and
    timestep conditions stay out of the penalty by not being passed here.
    """
    tracked = [x.detach().requires_grad_(True) for x in real_inputs]
    logits = score_fn(*tracked)
    grads = torch.autograd.grad(logits.sum(), tracked, create_graph=True)
    sq = 0.0
    for g in grads:
        sq = sq + g.pow(2).reshape(g.shape[0], -1).sum(dim=1)
    return 0.5 * sq.mean()


def density_regularization(
    planes: torch.Tensor,
    bounds: float,
    decoder: RadianceDecoder,
    rng: torch.Generator,
    n_points: int = 256,
    perturb_std: Optional[float] = None,
) -> torch.Tensor:
    """Density smoothness prior: mean |sigma(x) - sigma(x + delta)|.

    Points are uniform in the scene cube; twins are Gaussian-perturbed with
    std perturb_std (default 0.004 * bounds).

    Args:
        planes: (B, 3, C, R, R) batched tri-planes.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    if perturb_std is None:
        perturb_std = 0.004 * bounds
    b = planes.shape[0]
    dtype = planes.dtype
    pts = (torch.rand(b, n_points, 3, generator=rng, dtype=dtype) * 2 - 1) * bounds
    delta = torch.randn(b, n_points, 3, generator=rng, dtype=dtype) * perturb_std
    both = torch.cat([pts, pts + delta], dim=1)
    feats = sample_planes_batch(planes, both, bounds)
    density, _, _ = decoder(feats)
    base, shifted = density[:, :n_points], density[:, n_points:]
    return (base - shifted).abs().mean()


def _resolve_pair_cameras(mode: str, pose_i: CameraPose, pose_j: CameraPose):
    """Camera assignment for a generated pair under the conditioning mode.

    Returns (map_i, map_j, render_i, render_j). "All" shares the first
    frame's pose everywhere; "Non" and "MapT" use per-frame poses for both
    mapping and rendering during training; "Map" shares the mapping pose
    while rendering per frame.
    """
    if mode == "All":
        return pose_i, pose_i, pose_i, pose_i
    if mode == "Map":
        return pose_i, pose_i, pose_i, pose_j
    if mode in ("Non", "MapT"):
        return pose_i, pose_j, pose_i, pose_j
    raise ValueError(f"unknown camera mode {mode!r}")


class Trainer:
    """Alternating optimization over a clip dataset."""

    def __init__(
        self,
        generator: Generator,
        disc_img: ImageDiscriminator,
        disc_vid: VideoDiscriminator,
        records: Sequence[ClipRecord],
        config: TrainConfig,
    ):
        if not records:
            raise ValueError("at least one training clip is required")
        self.generator = generator
        self.disc_img = disc_img
        self.disc_vid = disc_vid
        self.records = list(records)
        self.config = config
        self.opt_g = torch.optim.Adam(
            generator.parameters(),
            lr=config.lr_generator,
            betas=(config.adam_beta1, config.adam_beta2),
        )
        self.opt_d = torch.optim.Adam(
            list(disc_img.parameters()) + list(disc_vid.parameters()),
            lr=config.lr_discriminator,
            betas=(config.adam_beta1, config.adam_beta2),
        )
        seeds = np.random.SeedSequence(config.seed).spawn(2)
        self.data_rng = np.random.default_rng(seeds[0])
        self.torch_rng = torch.Generator()
        self.torch_rng.manual_seed(int(seeds[1].generate_state(1)[0]))
        self.step_count = 0
        self._frame_cache: dict[tuple[str, int], tuple[torch.Tensor, CameraPose]] = {}

    # --- data ---

    def _load_frame(self, record: ClipRecord, index: int) -> tuple[torch.Tensor, CameraPose]:
        key = (record.clip_id, index)
        if key not in self._frame_cache:
            frames, poses = load_clip(record, [index])
            self._frame_cache[key] = (frames[0], poses[0])
        return self._frame_cache[key]

    def sample_batch(self) -> dict:
        """Real frame pairs with poses and normalized timesteps."""
        cfg = self.config
        frames_i, frames_j, poses_i, poses_j, t_i, t_j = [], [], [], [], [], []
        for _ in range(cfg.batch_size):
            record = self.records[int(self.data_rng.integers(len(self.records)))]
            i, j, ti, tj = sample_timestep_pair(
                record.frame_count,
                cfg.frame_span,
                (cfg.beta_alpha, cfg.beta_beta),
                self.data_rng,
                max_frames=self.generator.config.max_frames,
            )
            fi, pi = self._load_frame(record, i)
            fj, pj = self._load_frame(record, j)
            frames_i.append(fi)
            frames_j.append(fj)
            poses_i.append(pi)
            poses_j.append(pj)
            t_i.append(ti)
            t_j.append(tj)
        return {
            "real_i": torch.stack(frames_i),
            "real_j": torch.stack(frames_j),
            "poses_i": poses_i,
            "poses_j": poses_j,
            "t_i": torch.tensor(t_i),
            "t_j": torch.tensor(t_j),
        }

    # --- generation ---

    def _generate_pairs(self, batch: dict, latents=None):
        """Generate both frames of each fake pair from shared latents.

        Returns frames, raw renders, plane stacks, and the flat render
        poses used for discriminator conditioning (per the camera mode).
        """
        g = self.generator
        cfg = self.config
        b = batch["real_i"].shape[0]
        if latents is None:
            z_a = torch.randn(b, g.config.z_dim_appearance, generator=self.torch_rng)
            z_m = torch.randn(b, g.config.z_dim_motion, generator=self.torch_rng)
        else:
            z_a, z_m = latents
        map_i, map_j, rend_i, rend_j = [], [], [], []
        for pi, pj in zip(batch["poses_i"], batch["poses_j"]):
            mi, mj, ri, rj = _resolve_pair_cameras(g.config.camera_mode, pi, pj)
            map_i.append(mi)
            map_j.append(mj)
            rend_i.append(ri)
            rend_j.append(rj)
        # both timesteps of every pair are synthesized in one batched pass
        z_a2 = torch.cat([z_a, z_a])
        z_m2 = torch.cat([z_m, z_m])
        t2 = torch.cat([batch["t_i"], batch["t_j"]])
        map_flat = torch.stack([p.flatten() for p in map_i + map_j]).float()
        w_plus = g.map_appearance(z_a2, map_flat)
        motion = g.motion_codes(z_m2, t2)
        planes = g.synthesize_planes(w_plus, motion)
        # one jitter seed per pair so coincident (t, pose) frames coincide
        seeds = [self.step_count * 4096 + (k % b) for k in range(2 * b)]
        raw = g.render_planes(
            planes, rend_i + rend_j, cfg.render_steps, resolution=cfg.render_resolution, seeds=seeds
        )
        frames = g.super_res(
            raw.rgb.permute(0, 3, 1, 2), raw.features.permute(0, 3, 1, 2), w_plus[:, -1]
        )
        pose_flat = torch.stack([p.flatten() for p in rend_i + rend_j]).float()
        return frames, raw, planes, pose_flat

    # --- steps ---

    def train_step(self, batch: Optional[dict] = None) -> LossReport:
        """One D update then one G update; raises on non-finite losses."""
        cfg = self.config
        g = self.generator
        if batch is None:
            batch = self.sample_batch()
        b = batch["real_i"].shape[0]
        real2 = torch.cat([batch["real_i"], batch["real_j"]])
        real_raw2 = F.interpolate(real2, size=cfg.render_resolution, mode="area")
        pose_flat_i = torch.stack([p.flatten() for p in batch["poses_i"]]).float()
        pose_flat_j = torch.stack([p.flatten() for p in batch["poses_j"]]).float()
        real_pose2 = torch.cat([pose_flat_i, pose_flat_j])
        dt = batch["t_j"] - batch["t_i"]

        # D step: generated pairs contribute through detached frames
        for p in g.parameters():
            p.requires_grad_(False)
        with torch.no_grad():
            fake_frames, fake_raw, _, fake_pose2 = self._generate_pairs(batch)
        fake_raw_rgb = fake_raw.rgb.permute(0, 3, 1, 2)
        real_img_logit = self.disc_img(real2, real_raw2, real_pose2)
        fake_img_logit = self.disc_img(fake_frames, fake_raw_rgb, fake_pose2)
        l_img_d, _ = nonsaturating_losses(real_img_logit, fake_img_logit)
        real_vid_logit = self.disc_vid(
            batch["real_i"], batch["real_j"], dt, pose_flat_i, pose_flat_j
        )
        fake_vid_logit = self.disc_vid(
            fake_frames[:b], fake_frames[b:], dt, fake_pose2[:b], fake_pose2[b:]
        )
        l_vid_d, _ = nonsaturating_losses(real_vid_logit, fake_vid_logit)
        d_loss = cfg.lambda_img * l_img_d + cfg.lambda_vid * l_vid_d
        l_r1_value = 0.0
        if cfg.lambda_r1 > 0 and self.step_count % cfg.r1_interval == 0:
            r1_img = r1_penalty(
                lambda hi, raw: self.disc_img(hi, raw, real_pose2), real2, real_raw2
            )
            r1_vid = r1_penalty(
                lambda fi, fj: self.disc_vid(fi, fj, dt, pose_flat_i, pose_flat_j),
                batch["real_i"],
                batch["real_j"],
            )
            l_r1 = r1_img + r1_vid
            # lazy regularization: scale by the interval to keep the
            # expected per-step penalty unchanged
            d_loss = d_loss + cfg.lambda_r1 * cfg.r1_interval * l_r1
            l_r1_value = float(l_r1.detach())
        self.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self.opt_d.step()
        for p in g.parameters():
            p.requires_grad_(True)

        # G step: discriminators participate without being updated
        for p in list(self.disc_img.parameters()) + list(self.disc_vid.parameters()):
            p.requires_grad_(False)
        gen_frames, gen_raw, planes, gen_pose2 = self._generate_pairs(batch)
        gen_raw_rgb = gen_raw.rgb.permute(0, 3, 1, 2)
        g_img_logit = self.disc_img(gen_frames, gen_raw_rgb, gen_pose2)
        _, l_img_g = nonsaturating_losses(real_img_logit.detach(), g_img_logit)
        g_vid_logit = self.disc_vid(
            gen_frames[:b], gen_frames[b:], dt, gen_pose2[:b], gen_pose2[b:]
        )
        _, l_vid_g = nonsaturating_losses(real_vid_logit.detach(), g_vid_logit)
        l_sigma = density_regularization(
            planes,
            g.config.plane_bounds,
            g.decoder,
            self.torch_rng,
            n_points=cfg.density_points,
            perturb_std=cfg.density_perturb * g.config.plane_bounds,
        )
        g_loss = cfg.lambda_img * l_img_g + cfg.lambda_vid * l_vid_g + cfg.lambda_reg * l_sigma
        self.opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        self.opt_g.step()
        for p in list(self.disc_img.parameters()) + list(self.disc_vid.parameters()):
            p.requires_grad_(True)

        self.step_count += 1
        report = LossReport(
            l_img_g=float(l_img_g.detach()),
            l_vid_g=float(l_vid_g.detach()),
            l_sigma=float(l_sigma.detach()),
            l_img_d=float(l_img_d.detach()),
            l_vid_d=float(l_vid_d.detach()),
            l_r1=l_r1_value,
            d_real_logit=float(real_img_logit.detach().mean()),
            d_fake_logit=float(fake_img_logit.detach().mean()),
        )
        if not report.is_finite():
            raise TrainingDivergedError(
                f"non-finite loss at step {self.step_count}: {report}", report
            )
        return report

    def run(self, out_dir, iterations: Optional[int] = None) -> list[LossReport]:
        """Train, logging a CSV row per step and writing periodic checkpoints."""
        cfg = self.config
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        total = cfg.iterations if iterations is None else iterations
        reports = []
        log_path = out / "losses.csv"
        start = time.monotonic()
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration"] + LossReport.fields() + ["wall_time_s"])
            for it in range(total):
                report = self.train_step()
                reports.append(report)
                if it % cfg.log_interval == 0:
                    row = [it] + [getattr(report, f) for f in LossReport.fields()]
                    row.append(round(time.monotonic() - start, 3))
                    writer.writerow(row)
                    fh.flush()
                if cfg.checkpoint_interval and (it + 1) % cfg.checkpoint_interval == 0:
                    save_checkpoint(
                        out / f"checkpoint_{it + 1:06d}.pt",
                        self.generator,
                        self.disc_img,
                        self.disc_vid,
                        extra={"iteration": it + 1},
                    )
        save_checkpoint(
            out / "checkpoint.pt",
            self.generator,
            self.disc_img,
            self.disc_vid,
            extra={"iteration": total},
        )
        return reports

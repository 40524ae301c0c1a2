"""Multi-view consistency metrics and distribution distances.

Implements the evaluation suite: identity consistency across viewpoints and
timesteps (mean embedding inner product), median-form chamfer distance
between unprojected depth maps, depth-based image warping error, and the
Frechet distance between Gaussian fits of feature sets. Embedding networks
are pluggable; deterministic stubs ship in `plugins`.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree

from .camera import CameraPose, generate_rays, orbit_pose, yaw_pose
from .datapipe import ClipRecord, load_clip
from .generator import Generator
from .inference import synthesize_video
from .plugins import Extractor, ExtractorError
from .renderer import RenderOutput


class EmptyCloudError(ValueError):
    """No pixel survived the opacity threshold."""


# --- identity consistency ---


def identity_consistency(
    video_sampler: Callable,
    extractor: Extractor,
    yaws: Sequence[float] = (0.0, 30.0),
    n_videos: int = 1000,
    rng: Optional[np.random.Generator] = None,
    timesteps_per_video: int = 2,
    max_frames: int = 16,
    stats: Optional[dict] = None,
) -> float:
    """Mean embedding inner product over view/timestep frame pairs.

    Per video, frames are rendered at `timesteps_per_video` distinct random
    timesteps for every yaw; all pairs differing in timestep or yaw
    contribute. Embeddings are unit-normalized defensively, so the score
    lies in [-1, 1]. Videos whose extraction fails are skipped and counted
    in stats["skipped_videos"].
    """
    rng = rng or np.random.default_rng(0)
    total = 0.0
    count = 0
    skipped = 0
    for _ in range(n_videos):
        frame_fn = video_sampler(rng)
        t_indices = rng.choice(max_frames, size=timesteps_per_video, replace=False)
        keys = [(int(ti), float(y)) for ti in sorted(t_indices) for y in yaws]
        try:
            embeddings = {}
            for ti, y in keys:
                image = frame_fn(ti / (max_frames - 1), y)
                vec = np.asarray(extractor(np.asarray(image)), dtype=np.float64)
                norm = np.linalg.norm(vec)
                embeddings[(ti, y)] = vec / norm if norm > 0 else vec
        except ExtractorError:
            skipped += 1
            continue
        for a in range(len(keys)):
            for b in range(a + 1, len(keys)):
                (ta, ya), (tb, yb) = keys[a], keys[b]
                if ta == tb and ya == yb:
                    continue
                total += float(embeddings[keys[a]] @ embeddings[keys[b]])
                count += 1
    if stats is not None:
        stats["skipped_videos"] = stats.get("skipped_videos", 0) + skipped
    return total / count if count else float("nan")


# --- chamfer distance ---


def chamfer_distance(p0: np.ndarray, p1: np.ndarray) -> float:
    """Symmetric median-of-minima squared distance between point clouds.

    CD = med_{x in P0} min_y ||x - y||^2 + med_{y in P1} min_x ||x - y||^2;
    the median of an even-length list is the mean of its two central values.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    if p0.ndim != 2 or p1.ndim != 2 or p0.shape[0] == 0 or p1.shape[0] == 0:
        raise ValueError("point clouds must be non-empty (M, 3) arrays")
    d01, _ = cKDTree(p1).query(p0)
    d10, _ = cKDTree(p0).query(p1)
    return float(np.median(d01**2) + np.median(d10**2))


def depth_to_pointcloud(
    render: RenderOutput,
    pose: CameraPose,
    grid: int = 64,
    opacity_threshold: float = 0.5,
    bin_size: Optional[float] = None,
) -> np.ndarray:
    """Unproject terminating rays of a depth map into world points.

    Depth and opacity are resampled to grid x grid; pixels below the
    opacity threshold are dropped (non-terminating rays). When bin_size is
    given (the ray-interval length divided by the sample count), the world
    coordinates are divided by it.
    """
    depth = render.depth.detach().to(torch.float64)
    opacity = render.opacity.detach().to(torch.float64)
    if depth.shape != opacity.shape:
        raise ValueError("depth and opacity must share a shape")
    if depth.shape != (grid, grid):
        depth = F.interpolate(depth[None, None], size=(grid, grid), mode="bilinear", align_corners=False)[0, 0]
        opacity = F.interpolate(opacity[None, None], size=(grid, grid), mode="bilinear", align_corners=False)[0, 0]
    mask = (opacity >= opacity_threshold).reshape(-1)
    if not bool(mask.any()):
        raise EmptyCloudError("no pixel met the opacity threshold")
    rays = generate_rays(pose, grid, 0.0, 1.0)
    points = rays.origins + rays.directions * depth.reshape(-1, 1)
    points = points[mask]
    if bin_size is not None:
        points = points / bin_size
    return points.numpy()


# --- warping ---


def reproject_coordinates(
    d_src: np.ndarray,
    pose_src: CameraPose,
    pose_dst: CameraPose,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lift each source pixel center by its depth and project into pose_dst.

    Depth is the distance along the unit ray direction (the renderer's
    convention). Returns flat arrays (u, v, z): normalized destination
    image coordinates and destination camera depth; pixels landing behind
    the destination camera get coordinates (-1, -1).
    """
    depth = np.asarray(d_src, dtype=np.float64)
    if depth.ndim != 2 or depth.shape[0] != depth.shape[1]:
        raise ValueError("a square depth map is required")
    res = depth.shape[0]
    rays = generate_rays(pose_src, res, 0.0, 1.0)
    flat_depth = torch.from_numpy(depth.reshape(-1))
    points = rays.origins + rays.directions * flat_depth.unsqueeze(-1)
    cam = (points - pose_dst.center) @ pose_dst.rotation
    z = cam[:, 2].numpy()
    uvw = (cam @ pose_dst.intrinsic.T.to(cam.dtype)).numpy()
    front = z > 0
    u = np.full(z.shape, -1.0)
    v = np.full(z.shape, -1.0)
    u[front] = uvw[front, 0] / uvw[front, 2]
    v[front] = uvw[front, 1] / uvw[front, 2]
    return u, v, z


def warp_image(
    i_src: np.ndarray,
    d_src: np.ndarray,
    pose_src: CameraPose,
    pose_dst: CameraPose,
    valid: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Forward-warp a source image into a destination view via its depth.

    Every valid source pixel is lifted to 3D along its camera ray and
    reprojected into the destination camera; hits are splatted to the
    nearest destination pixel, ties resolved in favor of the smaller
    source depth.

    Returns:
        (warped image, boolean visibility mask, visible pixel count). The
        mask marks destination pixels that received at least one splat.
    """
    img = np.asarray(i_src, dtype=np.float64)
    depth = np.asarray(d_src, dtype=np.float64)
    if img.shape[:2] != depth.shape:
        raise ValueError("image and depth must share spatial dimensions")
    res = depth.shape[0]
    u, v, z = reproject_coordinates(depth, pose_src, pose_dst)
    px = np.floor(u * res).astype(np.int64)
    py = np.floor(v * res).astype(np.int64)
    in_fov = (z > 0) & (px >= 0) & (px < res) & (py >= 0) & (py < res)
    if valid is not None:
        in_fov &= np.asarray(valid, dtype=bool).reshape(-1)
    warped = np.zeros_like(img)
    mask = np.zeros((res, res), dtype=bool)
    src_idx = np.flatnonzero(in_fov)
    if src_idx.size:
        # write larger source depths first so the smallest depth wins
        order = src_idx[np.argsort(-depth.reshape(-1)[src_idx], kind="stable")]
        src_rows, src_cols = np.divmod(order, res)
        warped[py[order], px[order]] = img[src_rows, src_cols]
        mask[py[order], px[order]] = True
    return warped, mask, int(mask.sum())


def warping_error(
    i_target: np.ndarray,
    i_source: np.ndarray,
    d_source: np.ndarray,
    pose_target: CameraPose,
    pose_source: CameraPose,
    valid: Optional[np.ndarray] = None,
) -> float:
    """Mean absolute difference after warping the source into the target view.

    Images are expected on the [0, 255] scale. The mean runs over the
    visible destination pixels and the three channels.

    Raises:
        ValueError: no source pixel lands in the target view.
    """
    warped, mask, count = warp_image(i_source, d_source, pose_source, pose_target, valid=valid)
    if count == 0:
        raise ValueError("no visible pixels after warping; pair is undefined")
    target = np.asarray(i_target, dtype=np.float64)
    return float(np.abs(target[mask] - warped[mask]).mean())


# --- Frechet distance ---


def _sqrtm_psd(matrix: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix; negative eigenvalues clamp to 0."""
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray, shrinkage: float = 1e-6) -> float:
    """Frechet (2-Wasserstein) distance between Gaussian fits of two sets.

    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}). Covariances use
    the 1/n normalization; sets smaller than dim + 1 samples get shrinkage
    (eps * I) added for a full-rank estimate. The cross term is evaluated
    through the symmetrized product S_a^{1/2} S_b S_a^{1/2}, whose
    eigenvalues are clamped at zero.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("feature sets must be (N, D) arrays")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("each feature set needs at least 2 samples")
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature sets must share a dimension")
    dim = a.shape[1]
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sigma_a = np.cov(a, rowvar=False, bias=True)
    sigma_b = np.cov(b, rowvar=False, bias=True)
    sigma_a = np.atleast_2d(sigma_a)
    sigma_b = np.atleast_2d(sigma_b)
    if a.shape[0] < dim + 1:
        sigma_a = sigma_a + shrinkage * np.eye(dim)
    if b.shape[0] < dim + 1:
        sigma_b = sigma_b + shrinkage * np.eye(dim)
    root_a = _sqrtm_psd(sigma_a)
    cross = _sqrtm_psd(root_a @ sigma_b @ root_a)
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(sigma_a) + np.trace(sigma_b) - 2 * np.trace(cross))
    return max(value, 0.0)


# --- aggregation ---


@dataclass
class EvalConfig:
    """Protocol knobs for evaluate_model."""

    n_videos: int = 1000
    yaws: tuple[float, float] = (0.0, 30.0)
    steps: int = 48
    cd_grid: int = 64
    we_resolution: int = 256
    n_fvd: int = 0
    fvd_frames: int = 16
    seed: int = 0
    opacity_threshold: float = 0.5
    normalize_clouds: bool = True
    compute_cd: bool = True
    compute_we: bool = True


@dataclass
class MetricsReport:
    fvd: Optional[float]
    id: Optional[float]
    cd: Optional[float]
    we: Optional[float]
    n_videos: int
    skipped_pairs: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def generator_video_sampler(
    generator: Generator,
    reference_pose: Optional[CameraPose] = None,
    steps: int = 48,
):
    """Video sampler for identity_consistency backed by a generator.

    Each call draws fresh latents; the returned frame function renders the
    frozen scene at (t, yaw) with the mapping camera shared at the frontal
    reference, and yields (H, W, 3) float images in [0, 1].
    """
    reference = reference_pose or orbit_pose()

    def sampler(rng: np.random.Generator):
        z_a = torch.from_numpy(rng.standard_normal(generator.config.z_dim_appearance)).float()
        z_m = torch.from_numpy(rng.standard_normal(generator.config.z_dim_motion)).float()

        def frame_fn(t: float, yaw: float) -> np.ndarray:
            with torch.no_grad():
                frame, _ = generator.generate_frame(
                    z_a, z_m, t, yaw_pose(yaw, reference), reference, steps=steps, seed=0
                )
            return frame.clamp(0, 1).permute(1, 2, 0).numpy()

        return frame_fn

    return sampler


def _resize_image(image: torch.Tensor, size: int) -> np.ndarray:
    """(3, H, W) tensor in [0, 1] -> (size, size, 3) array on [0, 255]."""
    out = F.interpolate(image[None], size=(size, size), mode="bilinear", align_corners=False)[0]
    return (out.clamp(0, 1).permute(1, 2, 0).numpy() * 255.0)


def _resize_map(map2d: torch.Tensor, size: int) -> np.ndarray:
    out = F.interpolate(map2d[None, None].to(torch.float64), size=(size, size), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def evaluate_model(
    generator: Generator,
    records: Sequence[ClipRecord],
    extractors: Mapping[str, Extractor],
    config: EvalConfig,
) -> MetricsReport:
    """Run the metric protocol over freshly generated videos.

    extractors maps "image" to a face-embedding extractor (for ID) and
    "clip" to a video-embedding extractor (for FVD); omitted extractors
    leave the corresponding metric absent. CD and WE need no extractor.
    """
    rng = np.random.default_rng(config.seed)
    # subsystem seeds are drawn upfront so results do not depend on which
    # extractors happen to be supplied
    id_seed = int(rng.integers(2**32))
    pair_seed = int(rng.integers(2**32))
    fvd_seed = int(rng.integers(2**32))
    reference = orbit_pose()
    skipped = 0
    max_frames = generator.config.max_frames

    id_value = None
    if "image" in extractors:
        stats: dict = {}
        id_value = identity_consistency(
            generator_video_sampler(generator, reference, steps=config.steps),
            extractors["image"],
            yaws=config.yaws,
            n_videos=config.n_videos,
            rng=np.random.default_rng(id_seed),
            max_frames=max_frames,
            stats=stats,
        )
        skipped += stats.get("skipped_videos", 0)

    cd_values = []
    we_values = []
    bin_size = (generator.config.ray_far - generator.config.ray_near) / config.steps
    cloud_norm = bin_size if config.normalize_clouds else None
    pair_rng = np.random.default_rng(pair_seed)
    if config.compute_cd or config.compute_we:
        for _ in range(config.n_videos):
            z_a = torch.from_numpy(pair_rng.standard_normal(generator.config.z_dim_appearance)).float()
            z_m = torch.from_numpy(pair_rng.standard_normal(generator.config.z_dim_motion)).float()
            t_idx = pair_rng.choice(max_frames, size=2, replace=False)
            t_idx.sort()
            views = {}
            with torch.no_grad():
                for ti in t_idx:
                    for yaw in config.yaws:
                        frame, raw = generator.generate_frame(
                            z_a,
                            z_m,
                            ti / (max_frames - 1),
                            yaw_pose(yaw, reference),
                            reference,
                            steps=config.steps,
                            seed=0,
                        )
                        views[(int(ti), float(yaw))] = (frame, raw, yaw_pose(yaw, reference))
            keys = list(views)
            if config.compute_cd:
                # chamfer over every distinct (t, yaw) pair
                for a in range(len(keys)):
                    for b in range(a + 1, len(keys)):
                        try:
                            cloud_a = depth_to_pointcloud(
                                views[keys[a]][1], views[keys[a]][2], grid=config.cd_grid,
                                opacity_threshold=config.opacity_threshold, bin_size=cloud_norm,
                            )
                            cloud_b = depth_to_pointcloud(
                                views[keys[b]][1], views[keys[b]][2], grid=config.cd_grid,
                                opacity_threshold=config.opacity_threshold, bin_size=cloud_norm,
                            )
                            cd_values.append(chamfer_distance(cloud_a, cloud_b))
                        except EmptyCloudError:
                            skipped += 1
            if config.compute_we:
                # warping error over front/side combinations
                front_yaw, side_yaw = config.yaws[0], config.yaws[1]
                for ti in t_idx:
                    for tj in t_idx:
                        front = views[(int(ti), float(front_yaw))]
                        side = views[(int(tj), float(side_yaw))]
                        size = config.we_resolution
                        try:
                            we_values.append(
                                warping_error(
                                    _resize_image(front[0], size),
                                    _resize_image(side[0], size),
                                    _resize_map(side[1].depth, size),
                                    front[2],
                                    side[2],
                                    valid=_resize_map(side[1].opacity, size) >= config.opacity_threshold,
                                )
                            )
                        except ValueError:
                            skipped += 1

    fvd_value = None
    if "clip" in extractors and config.n_fvd > 0:
        fvd_rng = np.random.default_rng(fvd_seed)
        eligible = [r for r in records if r.frame_count >= config.fvd_frames]
        if eligible:
            real_feats = []
            fake_feats = []
            for _ in range(config.n_fvd):
                record = eligible[int(fvd_rng.integers(len(eligible)))]
                start = int(fvd_rng.integers(0, record.frame_count - config.fvd_frames + 1))
                frames, poses = load_clip(record, list(range(start, start + config.fvd_frames)))
                real_clip = frames.permute(0, 2, 3, 1).numpy()
                real_feats.append(extractors["clip"](real_clip))
                z_a = torch.from_numpy(fvd_rng.standard_normal(generator.config.z_dim_appearance)).float()
                z_m = torch.from_numpy(fvd_rng.standard_normal(generator.config.z_dim_motion)).float()
                clip = synthesize_video(
                    generator, z_a, z_m, poses, config.fvd_frames, mode="MapT",
                    steps=config.steps, base_seed=int(fvd_rng.integers(2**31)),
                )
                fake_clip = clip.frames.clamp(0, 1).permute(0, 2, 3, 1).numpy()
                fake_feats.append(extractors["clip"](fake_clip))
            fvd_value = frechet_distance(np.stack(real_feats), np.stack(fake_feats))

    return MetricsReport(
        fvd=fvd_value,
        id=id_value,
        cd=float(np.mean(cd_values)) if cd_values else None,
        we=float(np.mean(we_values)) if we_values else None,
        n_videos=config.n_videos,
        skipped_pairs=skipped,
    )

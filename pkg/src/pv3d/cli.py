"""Operator command line: train, generate, evaluate, invert, analyze, preprocess.

Exit codes: 2 for configuration errors, 3 for data errors, 4 for a training
abort on non-finite losses. On failure, stderr carries a single
machine-parseable line `PV3D-ERROR code=<n> msg="..."`. Every command takes
--seed and is reproducible: with one seed, the produced data artifacts are
byte-for-byte identical across runs (run manifests and wall-time columns
are the only varying outputs).

Environment: PV3D_DATA_ROOT supplies the default dataset root and
PV3D_PLUGINS the default extractor plugin directory.
"""

from __future__ import annotations

import contextlib
import dataclasses
import datetime
import hashlib
import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import camera, datapipe, inference, inversion, metrics
from .checkpoint import load_checkpoint, save_checkpoint
from .discriminators import ImageDiscriminator, VideoDiscriminator
from .generator import CAMERA_MODES, Generator, GeneratorConfig
from .plugins import ExtractorError, get_extractor
from .training import TrainConfig, Trainer, TrainingDivergedError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _fail(code: int, message: str):
    click.echo(f'PV3D-ERROR code={code} msg="{message}"', err=True)
    sys.exit(code)


@contextlib.contextmanager
def _guarded():
    try:
        yield
    except CliError as exc:
        _fail(exc.code, str(exc))
    except (datapipe.DataError, camera.PoseFormatError, camera.PoseValidationError, FileNotFoundError) as exc:
        _fail(EXIT_DATA, str(exc))
    except TrainingDivergedError as exc:
        _fail(EXIT_DIVERGED, str(exc))
    except (ValueError, ExtractorError) as exc:
        _fail(EXIT_CONFIG, str(exc))


@contextlib.contextmanager
def _output_lock(out_dir: Path):
    """Exclusive lock file guarding an output directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".pv3d.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(EXIT_CONFIG, f"output directory {out_dir} is locked by another run ({lock})")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(OSError):
            lock.unlink()


def _file_hash(path: Path | None) -> str | None:
    if path is None:
        return None
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _write_manifest(out_dir: Path, command: str, config: dict, seed: int, checkpoint: Path | None):
    """Atomic run manifest, written before any work starts."""
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "checkpoint_hash": _file_hash(checkpoint),
        "started_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    tmp = out_dir / ".manifest.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(out_dir / "run_manifest.json")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise CliError(EXIT_CONFIG, f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise CliError(EXIT_CONFIG, f"config file {path} must hold a JSON object")
    return payload


def _build_dataclass(cls, file_section: dict, overrides: dict):
    """Config precedence: CLI flag > config file > built-in default."""
    known = {f.name for f in dataclasses.fields(cls)}
    bad = set(file_section) - known
    if bad:
        raise CliError(EXIT_CONFIG, f"unknown {cls.__name__} keys in config file: {sorted(bad)}")
    merged = dict(file_section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"bad {cls.__name__}: {exc}") from exc


def _load_models(checkpoint_path: str):
    path = Path(checkpoint_path)
    if not path.exists():
        raise CliError(EXIT_DATA, f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _orbit_sequence(orbit: str, n_frames: int) -> list[camera.CameraPose]:
    try:
        yaws = [float(v) for v in orbit.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"bad --orbit value {orbit!r}: {exc}") from exc
    if not yaws:
        raise CliError(EXIT_CONFIG, "--orbit needs at least one yaw angle")
    if len(yaws) == 1:
        yaws = yaws * n_frames
    if len(yaws) != n_frames:
        raise CliError(EXIT_CONFIG, f"--orbit lists {len(yaws)} yaws for {n_frames} frames")
    return [camera.orbit_pose(y) for y in yaws]


@click.group()
def main():
    """3D-aware portrait video generation toolkit."""


@main.command()
@click.option("--config", "config_path", type=str, default=None, help="JSON config file")
@click.option("--data-root", type=str, default=None, envvar="PV3D_DATA_ROOT")
@click.option("--out", "out_dir", type=str, required=True)
@click.option("--seed", type=int, default=None)
@click.option("--iterations", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--render-resolution", type=int, default=None)
@click.option("--camera-mode", type=click.Choice(CAMERA_MODES), default=None)
def train(config_path, data_root, out_dir, seed, iterations, batch_size, render_resolution, camera_mode):
    """Train on a clip dataset; writes checkpoints and a loss CSV."""
    with _guarded():
        if data_root is None:
            raise CliError(EXIT_CONFIG, "--data-root (or PV3D_DATA_ROOT) is required")
        file_cfg = _load_config_file(config_path)
        train_cfg = _build_dataclass(
            TrainConfig,
            file_cfg.get("train", {}),
            {
                "seed": seed,
                "iterations": iterations,
                "batch_size": batch_size,
                "render_resolution": render_resolution,
            },
        )
        gen_cfg = _build_dataclass(
            GeneratorConfig, file_cfg.get("generator", {}), {"camera_mode": camera_mode}
        )
        records = datapipe.scan_dataset(data_root)
        if not records:
            raise datapipe.DataError(f"no clips found under {data_root}")
        out = Path(out_dir)
        with _output_lock(out):
            _write_manifest(
                out,
                "train",
                {"train": dataclasses.asdict(train_cfg), "generator": dataclasses.asdict(gen_cfg)},
                train_cfg.seed,
                None,
            )
            torch.manual_seed(train_cfg.seed)
            generator = Generator(gen_cfg)
            disc_img = ImageDiscriminator(gen_cfg.final_resolution)
            disc_vid = VideoDiscriminator(gen_cfg.final_resolution)
            trainer = Trainer(generator, disc_img, disc_vid, records, train_cfg)
            trainer.run(out)
        click.echo(f"trained {train_cfg.iterations} iterations -> {out}")


@main.command()
@click.option("--checkpoint", type=str, required=True)
@click.option("--pose-file", type=str, default=None)
@click.option("--orbit", type=str, default=None, help="comma-separated yaw degrees")
@click.option("--seed", type=int, default=0)
@click.option("--frames", "n_frames", type=int, default=16)
@click.option("--mode", type=click.Choice(CAMERA_MODES), default=None)
@click.option("--steps", type=int, default=48)
@click.option("--out", "out_dir", type=str, required=True)
def generate(checkpoint, pose_file, orbit, seed, n_frames, mode, steps, out_dir):
    """Synthesize a video clip and export frames, poses, and metadata."""
    with _guarded():
        if (pose_file is None) == (orbit is None):
            raise CliError(EXIT_CONFIG, "exactly one of --pose-file or --orbit is required")
        generator, _, _, _ = _load_models(checkpoint)
        if pose_file is not None:
            poses = camera.load_pose_file(pose_file)
            if len(poses) < n_frames:
                raise datapipe.DataError(
                    f"pose file {pose_file} has {len(poses)} poses, need {n_frames}"
                )
            seq = poses[:n_frames]
        else:
            seq = _orbit_sequence(orbit, n_frames)
        out = Path(out_dir)
        with _output_lock(out):
            _write_manifest(
                out,
                "generate",
                {"frames": n_frames, "mode": mode or generator.config.camera_mode, "steps": steps},
                seed,
                Path(checkpoint),
            )
            g = torch.Generator().manual_seed(seed)
            z_a = torch.randn(generator.config.z_dim_appearance, generator=g)
            z_m = torch.randn(generator.config.z_dim_motion, generator=g)
            clip = inference.synthesize_video(
                generator, z_a, z_m, seq, n_frames, mode=mode, steps=steps, base_seed=seed
            )
            inference.export_clip(clip, out)
        click.echo(f"wrote {n_frames} frames -> {out}")


@main.command()
@click.option("--checkpoint", type=str, required=True)
@click.option("--data-root", type=str, default=None, envvar="PV3D_DATA_ROOT")
@click.option("--metrics", "metric_list", type=str, default="id,cd,we")
@click.option("--extractor", "extractor_name", type=str, default=None, help="image embedding extractor")
@click.option("--clip-extractor", "clip_extractor_name", type=str, default=None)
@click.option("--plugins-dir", type=str, default=None, envvar="PV3D_PLUGINS")
@click.option("--n-videos", type=int, default=8)
@click.option("--n-fvd", type=int, default=8)
@click.option("--steps", type=int, default=48)
@click.option("--we-resolution", type=int, default=256)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", type=str, required=True)
def evaluate(
    checkpoint,
    data_root,
    metric_list,
    extractor_name,
    clip_extractor_name,
    plugins_dir,
    n_videos,
    n_fvd,
    steps,
    we_resolution,
    seed,
    out_dir,
):
    """Run the multi-view consistency metric suite; writes metrics.json."""
    with _guarded():
        wanted = {m.strip() for m in metric_list.split(",") if m.strip()}
        unknown = wanted - {"id", "cd", "we", "fvd"}
        if unknown:
            raise CliError(EXIT_CONFIG, f"unknown metrics: {sorted(unknown)}")
        generator, _, _, _ = _load_models(checkpoint)
        extractors = {}
        if "id" in wanted and extractor_name:
            extractors["image"] = get_extractor(extractor_name, plugins_dir)
        if "fvd" in wanted and clip_extractor_name:
            extractors["clip"] = get_extractor(clip_extractor_name, plugins_dir)
        records = []
        if "fvd" in wanted and "clip" in extractors:
            if data_root is None:
                raise CliError(EXIT_CONFIG, "--data-root is required for fvd")
            records = datapipe.scan_dataset(data_root)
        cfg = metrics.EvalConfig(
            n_videos=n_videos,
            steps=steps,
            we_resolution=we_resolution,
            n_fvd=n_fvd if "fvd" in wanted else 0,
            seed=seed,
            compute_cd="cd" in wanted,
            compute_we="we" in wanted,
        )
        out = Path(out_dir)
        with _output_lock(out):
            _write_manifest(
                out, "evaluate", {"metrics": sorted(wanted), "n_videos": n_videos}, seed, Path(checkpoint)
            )
            report = metrics.evaluate_model(generator, records, extractors, cfg)
            (out / "metrics.json").write_text(report.to_json())
        click.echo(report.to_json())


@main.command()
@click.option("--checkpoint", type=str, required=True)
@click.option("--target", type=str, required=True, help="PNG image or clip directory")
@click.option("--pose-file", type=str, required=True)
@click.option("--steps", type=int, default=500)
@click.option("--render-steps", type=int, default=24)
@click.option("--lr", type=float, default=0.05)
@click.option("--seed", type=int, default=0)
@click.option("--animate", "animate_seed", type=int, default=None)
@click.option("--animate-frames", type=int, default=16)
@click.option("--out", "out_dir", type=str, required=True)
def invert(checkpoint, target, pose_file, steps, render_steps, lr, seed, animate_seed, animate_frames, out_dir):
    """Recover latent codes for a still or a clip; optionally drive them."""
    with _guarded():
        generator, _, _, _ = _load_models(checkpoint)
        poses = camera.load_pose_file(pose_file)
        if not poses:
            raise datapipe.DataError(f"pose file {pose_file} is empty")
        opt = inversion.OptConfig(steps=steps, lr=lr, render_steps=render_steps, seed=seed)
        target_path = Path(target)
        out = Path(out_dir)
        with _output_lock(out):
            _write_manifest(out, "invert", {"steps": steps, "lr": lr}, seed, Path(checkpoint))
            if target_path.is_dir():
                records = [r for r in datapipe.scan_dataset(target_path.parent) if r.clip_id == target_path.name]
                if not records:
                    raise datapipe.DataError(f"{target_path} is not a clip directory")
                record = records[0]
                frames, clip_poses = datapipe.load_clip(record, list(range(record.frame_count)))
                result = inversion.invert_video(frames, clip_poses, generator, opt)
            else:
                from PIL import Image

                if not target_path.exists():
                    raise datapipe.DataError(f"target {target_path} does not exist")
                with Image.open(target_path) as img:
                    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
                still = torch.from_numpy(arr).permute(2, 0, 1)
                result = inversion.invert_image(still, poses[0], generator, opt)
            inversion.save_inversion(out, result)
            if animate_seed is not None:
                g = torch.Generator().manual_seed(animate_seed)
                z_m = torch.randn(generator.config.z_dim_motion, generator=g)
                seq = poses if len(poses) == animate_frames else [poses[0]] * animate_frames
                clip = inversion.animate(
                    result.w_plus, z_m, seq, generator, animate_frames, steps=render_steps
                )
                inference.export_clip(clip, out / "animated")
        click.echo(f"inversion written -> {out}")


@main.command()
@click.option("--checkpoint", type=str, required=True)
@click.option("--style-mix", "style_mix_ks", type=str, default=None, help="comma-separated layer counts")
@click.option("--disc-align", "disc_align_pairs", type=int, default=None)
@click.option("--data-root", type=str, default=None, envvar="PV3D_DATA_ROOT")
@click.option("--steps", type=int, default=24)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", type=str, required=True)
def analyze(checkpoint, style_mix_ks, disc_align_pairs, data_root, steps, seed, out_dir):
    """Style-mixing grids and video-discriminator camera-order analysis."""
    with _guarded():
        if (style_mix_ks is None) and (disc_align_pairs is None):
            raise CliError(EXIT_CONFIG, "one of --style-mix or --disc-align is required")
        generator, _, disc_vid, _ = _load_models(checkpoint)
        out = Path(out_dir)
        with _output_lock(out):
            _write_manifest(
                out,
                "analyze",
                {"style_mix": style_mix_ks, "disc_align": disc_align_pairs},
                seed,
                Path(checkpoint),
            )
            if style_mix_ks is not None:
                ks = [int(v) for v in style_mix_ks.split(",")] if style_mix_ks.strip() else [2, 4, 6]
                _run_style_mix(generator, ks, steps, seed, out)
            if disc_align_pairs is not None:
                if disc_vid is None:
                    raise CliError(EXIT_CONFIG, "checkpoint has no video discriminator")
                summary = _run_disc_align(
                    generator, disc_vid, disc_align_pairs, data_root, steps, seed, out
                )
                click.echo(json.dumps(summary, indent=2, sort_keys=True))
        click.echo(f"analysis written -> {out}")


def _save_image(tensor: torch.Tensor, path: Path):
    from PIL import Image

    arr = (tensor.clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def _run_style_mix(generator: Generator, ks: list[int], steps: int, seed: int, out: Path):
    """Render source frames plus mixes taking the first K layers from B."""
    from .generator import style_mix

    g = torch.Generator().manual_seed(seed)
    pose = camera.orbit_pose()
    z_a1 = torch.randn(generator.config.z_dim_appearance, generator=g)
    z_a2 = torch.randn(generator.config.z_dim_appearance, generator=g)
    z_m = torch.randn(generator.config.z_dim_motion, generator=g)
    t = 0.0
    with torch.no_grad():
        w1 = generator.map_appearance(z_a1.reshape(1, -1), pose)
        w2 = generator.map_appearance(z_a2.reshape(1, -1), pose)
        motion = generator.motion_codes(z_m.reshape(1, -1), torch.tensor([t]))
        frame_a, _ = generator.generate_frames(w1, motion, [pose], steps, seeds=[0])
        frame_b, _ = generator.generate_frames(w2, motion, [pose], steps, seeds=[0])
        _save_image(frame_a[0], out / "stylemix_source_a.png")
        _save_image(frame_b[0], out / "stylemix_source_b.png")
        rows = []
        for k in ks:
            k_eff = min(k, generator.num_layers)
            mixed = style_mix(w1, w2, k_eff)
            frame_m, _ = generator.generate_frames(mixed, motion, [pose], steps, seeds=[0])
            _save_image(frame_m[0], out / f"stylemix_k{k}.png")
            # one row per K: source A | source B | mix of the first K layers
            rows.append(torch.cat([frame_a[0], frame_b[0], frame_m[0]], dim=2))
        _save_image(torch.cat(rows, dim=1), out / "stylemix_grid.png")


def _sample_pose_pairs(data_root, n_pairs: int, rng: np.random.Generator):
    """Camera pose pairs from dataset pose files, or a synthetic orbit."""
    pool: list[camera.CameraPose] = []
    if data_root is not None:
        for record in datapipe.scan_dataset(data_root):
            pool.extend(camera.load_pose_file(record.pose_path))
    pairs = []
    for _ in range(n_pairs):
        if len(pool) >= 2:
            i, j = rng.choice(len(pool), size=2, replace=False)
            pairs.append((pool[int(i)], pool[int(j)]))
        else:
            y1, y2 = rng.uniform(-40, 40, size=2)
            p1, p2 = rng.uniform(-10, 10, size=2)
            pairs.append((camera.orbit_pose(y1, p1), camera.orbit_pose(y2, p2)))
    return pairs


def _run_disc_align(
    generator: Generator,
    disc_vid: VideoDiscriminator,
    n_pairs: int,
    data_root,
    steps: int,
    seed: int,
    out: Path,
) -> dict:
    """Order sensitivity of the video critic to its camera-pair condition.

    For each sampled pose pair, compares the conditioning embedding and the
    frame-pair logit under the original and flipped orderings; writes
    histogram CSVs of the cosine similarities and absolute logit changes.
    """
    rng = np.random.default_rng(seed)
    torch_g = torch.Generator().manual_seed(seed)
    pairs = _sample_pose_pairs(data_root, n_pairs, rng)
    cosines = []
    logit_diffs = []
    n_max = generator.config.max_frames
    with torch.no_grad():
        for c_i, c_j in pairs:
            ci = c_i.flatten().float().unsqueeze(0)
            cj = c_j.flatten().float().unsqueeze(0)
            e_fwd = disc_vid.embed_condition(ci, cj)[0]
            e_rev = disc_vid.embed_condition(cj, ci)[0]
            denom = e_fwd.norm() * e_rev.norm()
            cosines.append(float(e_fwd @ e_rev / denom) if denom > 0 else 1.0)
            z_a = torch.randn(1, generator.config.z_dim_appearance, generator=torch_g)
            z_m = torch.randn(1, generator.config.z_dim_motion, generator=torch_g)
            idx = rng.choice(n_max, size=2, replace=False)
            idx.sort()
            t_i, t_j = idx[0] / (n_max - 1), idx[1] / (n_max - 1)
            w_plus = generator.map_appearance(torch.cat([z_a, z_a]), torch.cat([ci, cj]))
            motion = generator.motion_codes(torch.cat([z_m, z_m]), torch.tensor([t_i, t_j]))
            frames, _ = generator.generate_frames(
                w_plus, motion, [c_i, c_j], steps, seeds=[0, 0]
            )
            dt = torch.tensor([t_j - t_i], dtype=frames.dtype)
            logit_fwd = disc_vid(frames[:1], frames[1:], dt, ci, cj)
            logit_rev = disc_vid(frames[:1], frames[1:], dt, cj, ci)
            logit_diffs.append(float((logit_fwd - logit_rev).abs()))
    _write_histogram(out / "disc_align_embedding.csv", np.asarray(cosines), lo=-1.0, hi=1.0)
    _write_histogram(out / "disc_align_logit.csv", np.asarray(logit_diffs))
    changed = sum(1 for d in logit_diffs if d > 1e-6)
    summary = {
        "n_pairs": n_pairs,
        "fraction_logit_changed": changed / n_pairs,
        "mean_embedding_cosine": float(np.mean(cosines)),
        "mean_logit_abs_change": float(np.mean(logit_diffs)),
    }
    (out / "disc_align_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _write_histogram(path: Path, values: np.ndarray, bins: int = 30, lo=None, hi=None):
    lo = float(values.min()) if lo is None else lo
    hi = float(values.max()) if hi is None else hi
    if hi <= lo:
        hi = lo + 1e-9
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    with open(path, "w") as fh:
        fh.write("bin_left,bin_right,count\n")
        for i, c in enumerate(counts):
            fh.write(f"{edges[i]},{edges[i + 1]},{int(c)}\n")


@main.command()
@click.option("--data-root", type=str, default=None, envvar="PV3D_DATA_ROOT", required=True)
@click.option("--embeddings", "emb_dir", type=str, required=True)
@click.option("--balance", is_flag=True, default=False)
@click.option("--verify", is_flag=True, default=False)
@click.option("--linkage-threshold", type=float, default=0.5)
@click.option("--max-per-identity", type=int, default=2)
@click.option("--similarity-threshold", type=float, default=0.5)
@click.option("--max-noisy", type=int, default=2)
@click.option("--out", "out_dir", type=str, required=True)
def preprocess(
    data_root,
    emb_dir,
    balance,
    verify,
    linkage_threshold,
    max_per_identity,
    similarity_threshold,
    max_noisy,
    out_dir,
):
    """Identity balancing and clip verification from precomputed embeddings."""
    with _guarded():
        if not (balance or verify):
            raise CliError(EXIT_CONFIG, "at least one of --balance or --verify is required")
        records = datapipe.scan_dataset(data_root)
        if not records:
            raise datapipe.DataError(f"no clips found under {data_root}")
        emb_path = Path(emb_dir)
        out = Path(out_dir)
        with _output_lock(out):
            _write_manifest(
                out,
                "preprocess",
                {
                    "balance": balance,
                    "verify": verify,
                    "linkage_threshold": linkage_threshold,
                    "similarity_threshold": similarity_threshold,
                },
                0,
                None,
            )
            surviving = {r.clip_id: r for r in records}
            if verify:
                report = {}
                for record in records:
                    frames_emb = emb_path / f"{record.clip_id}.frames.emb"
                    if not frames_emb.exists():
                        raise datapipe.DataError(f"missing frame embeddings {frames_emb}")
                    emb = datapipe.load_embedding_file(frames_emb)
                    keep, noisy = datapipe.verify_clip(
                        emb, threshold=similarity_threshold, max_noisy=max_noisy
                    )
                    report[record.clip_id] = {"keep": keep, "noisy_frames": noisy}
                    if not keep:
                        surviving.pop(record.clip_id, None)
                (out / "verify_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
            if balance:
                embeddings = {}
                for clip_id in surviving:
                    emb_file = emb_path / f"{clip_id}.emb"
                    if not emb_file.exists():
                        raise datapipe.DataError(f"missing clip embedding {emb_file}")
                    embeddings[clip_id] = datapipe.load_embedding_file(emb_file)[0]
                resolutions = {
                    cid: r.resolution for cid, r in surviving.items() if r.resolution is not None
                }
                selected = datapipe.balance_identities(
                    embeddings,
                    linkage_threshold,
                    max_per_identity=max_per_identity,
                    resolutions=resolutions or None,
                )
                clusters = datapipe.cluster_identities(embeddings, linkage_threshold)
                (out / "balance_report.json").write_text(
                    json.dumps({"selected": selected, "clusters": clusters}, indent=2, sort_keys=True)
                )
                surviving = {cid: surviving[cid] for cid in selected}
            manifest = {
                cid: {"identity": rec.identity, "resolution": rec.resolution}
                for cid, rec in sorted(surviving.items())
            }
            (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        click.echo(f"{len(surviving)} clips retained -> {out}")


if __name__ == "__main__":
    main()

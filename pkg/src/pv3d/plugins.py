"""Named registry of embedding extractors, with out-of-process support.

An image extractor maps an (H, W, 3) float array in [0, 1] to a fixed-size
1-D vector; a clip extractor does the same for a (T, H, W, 3) clip array.
Deterministic built-in stubs keep the metric machinery testable without any
pretrained network:

    const8   - constant unit vector (image)
    pool64   - 8x8 average pool + fixed random projection, unit norm (image)
    pool3d64 - 4x4x4 spatio-temporal average pool + fixed projection (clip)

Out-of-process extractors use a file protocol: the executable is invoked as
`prog <input.npy> <output.txt>`, reads the float32 input array, and writes
one line of whitespace-separated floats. Register them as `exec:<path>`, or
drop an executable named `<name>` into the directory given by --plugins-dir
or the PV3D_PLUGINS environment variable.
"""

from __future__ import annotations

import os
import subprocess
import tempfile
from pathlib import Path
from typing import Callable, Optional

import numpy as np

Extractor = Callable[[np.ndarray], np.ndarray]

_REGISTRY: dict[str, Callable[[], Extractor]] = {}


class ExtractorError(RuntimeError):
    """An extractor could not be found or failed to produce a vector."""


def register_extractor(name: str):
    def deco(factory: Callable[[], Extractor]):
        _REGISTRY[name] = factory
        return factory

    return deco


def available_extractors() -> list[str]:
    return sorted(_REGISTRY)


@register_extractor("const8")
def _const8() -> Extractor:
    vec = np.zeros(8)
    vec[0] = 1.0

    def extract(image: np.ndarray) -> np.ndarray:
        return vec.copy()

    return extract


def _pooled_projection(pooled_size: int, out_dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((out_dim, pooled_size))


def _average_pool_2d(image: np.ndarray, grid: int = 8) -> np.ndarray:
    h, w = image.shape[:2]
    ys = np.linspace(0, h, grid + 1).astype(int)
    xs = np.linspace(0, w, grid + 1).astype(int)
    out = np.empty((grid, grid, image.shape[2]))
    for i in range(grid):
        for j in range(grid):
            out[i, j] = image[ys[i] : ys[i + 1], xs[j] : xs[j + 1]].mean(axis=(0, 1))
    return out


@register_extractor("pool64")
def _pool64() -> Extractor:
    proj = _pooled_projection(8 * 8 * 3, 64, seed=1234)

    def extract(image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ExtractorError(f"expected an (H, W, 3) image, got {image.shape}")
        pooled = _average_pool_2d(image).reshape(-1)
        vec = proj @ pooled
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    return extract


@register_extractor("pool3d64")
def _pool3d64() -> Extractor:
    grid_t, grid_s = 4, 4
    proj = _pooled_projection(grid_t * grid_s * grid_s * 3, 64, seed=5678)

    def extract(clip: np.ndarray) -> np.ndarray:
        clip = np.asarray(clip, dtype=np.float64)
        if clip.ndim != 4 or clip.shape[3] != 3:
            raise ExtractorError(f"expected a (T, H, W, 3) clip, got {clip.shape}")
        t, h, w, _ = clip.shape
        ts = np.linspace(0, t, grid_t + 1).astype(int)
        ys = np.linspace(0, h, grid_s + 1).astype(int)
        xs = np.linspace(0, w, grid_s + 1).astype(int)
        pooled = np.empty((grid_t, grid_s, grid_s, 3))
        for a in range(grid_t):
            for b in range(grid_s):
                for c in range(grid_s):
                    pooled[a, b, c] = clip[
                        ts[a] : max(ts[a + 1], ts[a] + 1),
                        ys[b] : ys[b + 1],
                        xs[c] : xs[c + 1],
                    ].mean(axis=(0, 1, 2))
        return proj @ pooled.reshape(-1)

    return extract


class ExecExtractor:
    """Runs an external program per input via the npy-in / text-out protocol."""

    def __init__(self, program: Path):
        self.program = Path(program)
        if not self.program.exists():
            raise ExtractorError(f"extractor program {self.program} does not exist")

    def __call__(self, array: np.ndarray) -> np.ndarray:
        with tempfile.TemporaryDirectory() as tmp:
            in_path = Path(tmp) / "input.npy"
            out_path = Path(tmp) / "output.txt"
            np.save(in_path, np.asarray(array, dtype=np.float32))
            result = subprocess.run(
                [str(self.program), str(in_path), str(out_path)],
                capture_output=True,
                text=True,
            )
            if result.returncode != 0:
                raise ExtractorError(
                    f"extractor {self.program} failed ({result.returncode}): {result.stderr.strip()}"
                )
            try:
                values = [float(v) for v in out_path.read_text().split()]
            except (OSError, ValueError) as exc:
                raise ExtractorError(f"extractor {self.program} wrote no valid vector: {exc}") from exc
        if not values:
            raise ExtractorError(f"extractor {self.program} wrote an empty vector")
        return np.asarray(values)


def get_extractor(name: str, plugins_dir: Optional[str] = None) -> Extractor:
    """Resolve an extractor by registry name, exec: path, or plugin dir."""
    if name in _REGISTRY:
        return _REGISTRY[name]()
    if name.startswith("exec:"):
        return ExecExtractor(Path(name[len("exec:") :]))
    search_dir = plugins_dir or os.environ.get("PV3D_PLUGINS")
    if search_dir:
        candidate = Path(search_dir) / name
        if candidate.exists():
            return ExecExtractor(candidate)
    raise ExtractorError(
        f"unknown extractor {name!r}; built-ins: {', '.join(available_extractors())}"
    )

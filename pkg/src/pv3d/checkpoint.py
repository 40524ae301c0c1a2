"""Checkpoint archive: all named parameter tensors plus the generator config.

A checkpoint is a single torch archive with a JSON sidecar of the generator
config (`<name>.json`) so the architecture is inspectable without loading
tensors.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Optional

import torch

from .discriminators import ImageDiscriminator, VideoDiscriminator
from .generator import Generator, GeneratorConfig


def save_checkpoint(
    path,
    generator: Generator,
    disc_img: Optional[ImageDiscriminator] = None,
    disc_vid: Optional[VideoDiscriminator] = None,
    extra: Optional[dict] = None,
) -> Path:
    path = Path(path)
    payload = {
        "generator": generator.state_dict(),
        "generator_config": dataclasses.asdict(generator.config),
        "disc_img": disc_img.state_dict() if disc_img is not None else None,
        "disc_vid": disc_vid.state_dict() if disc_vid is not None else None,
        "extra": extra or {},
    }
    torch.save(payload, path)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(dataclasses.asdict(generator.config), indent=2, sort_keys=True))
    return path


def load_generator_config(path) -> GeneratorConfig:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    return GeneratorConfig(**payload["generator_config"])


def load_checkpoint(path) -> tuple[Generator, Optional[ImageDiscriminator], Optional[VideoDiscriminator], dict]:
    """Rebuild the models stored in a checkpoint archive."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    config = GeneratorConfig(**payload["generator_config"])
    generator = Generator(config)
    generator.load_state_dict(payload["generator"])
    disc_img = None
    disc_vid = None
    if payload.get("disc_img") is not None:
        disc_img = ImageDiscriminator(config.final_resolution)
        disc_img.load_state_dict(payload["disc_img"])
    if payload.get("disc_vid") is not None:
        disc_vid = VideoDiscriminator(config.final_resolution)
        disc_vid.load_state_dict(payload["disc_vid"])
    return generator, disc_img, disc_vid, payload.get("extra", {})


def load_generator(path) -> Generator:
    generator, _, _, _ = load_checkpoint(path)
    return generator

import numpy as np
import pytest
import torch

from pv3d.generator import Generator, GeneratorConfig

ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _single_threaded_determinism():
    torch.manual_seed(0)


def tiny_config(**overrides) -> GeneratorConfig:
    """Small generator config keeping unit tests fast."""
    base = dict(
        k_motion=2,
        layer_count=4,
        plane_channels=4,
        plane_resolution=16,
        base_resolution=8,
        final_resolution=16,
        camera_mode="MapT",
        max_frames=16,
        z_dim_appearance=8,
        z_dim_motion=8,
        style_dim=16,
        motion_hidden=16,
        mapping_hidden=16,
        decoder_hidden=16,
        feature_channels=4,
        sr_hidden=8,
        channel_base=256,
        channel_max=32,
    )
    base.update(overrides)
    return GeneratorConfig(**base)


@pytest.fixture
def tiny_generator() -> Generator:
    torch.manual_seed(7)
    return Generator(tiny_config())


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)

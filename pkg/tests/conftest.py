import numpy as np
import pytest

from driverintent.embed import MultiViewFrame
from driverintent.encoder import EncoderConfig
from driverintent.model import IntentModel, ModelConfig, ViewGeometry

_acceptance_lines: list[str] = []


def record_acceptance(line: str) -> None:
    """Collect acceptance pass/fail lines for the terminal summary."""
    _acceptance_lines.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


def make_frames(model_config: ModelConfig, n: int, seed: int = 0):
    """Random in-range frames matching a model's view geometry."""
    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(n):
        frames.append(MultiViewFrame([
            rng.random((g.channels, g.height, g.width), dtype=np.float32)
            for g in model_config.views
        ]))
    return frames


def tiny_config(n_mem: int = 2, n_layers: int = 1, dim: int = 16, n_heads: int = 2,
                side: int = 16, patch: int = 8, n_views: int = 1) -> ModelConfig:
    return ModelConfig(
        views=tuple(ViewGeometry(1, side, side) for _ in range(n_views)),
        patch_size=patch,
        encoder=EncoderConfig(n_layers=n_layers, dim=dim, n_heads=n_heads,
                              n_mem=n_mem, n_classes=5),
    )


@pytest.fixture
def tiny_model() -> IntentModel:
    return IntentModel.create(tiny_config(), seed=7)

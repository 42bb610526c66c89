import numpy as np
import pytest

from privpose.model import BackboneConfig
from privpose.synthetic import SyntheticConfig, generate_synthetic
from privpose.training import TrainConfig

SMALL_BB = BackboneConfig(base_width=4, num_stages=2, out_channels=8, stem_width=8,
                          blocks_per_branch=1)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Eight 64x64 samples split 6/2."""
    root = tmp_path_factory.mktemp("synth") / "ds"
    return generate_synthetic(root, 8, seed=3, cfg=SyntheticConfig(width=64, height=64),
                              splits={"train": 6, "test": 2})


@pytest.fixture
def small_cfg(tmp_path):
    def make(stage=1, **kw):
        base = dict(stage=stage, epochs=2, batch_size=3, input_size=64, backbone=SMALL_BB,
                    head_width=8, out_dir=str(tmp_path / f"run{stage}"))
        base.update(kw)
        return TrainConfig(**base)
    return make


def random_skeleton(rng, n=14, z=(50.0, 450.0), spread=60.0):
    Z = rng.uniform(*z, size=n)
    X = rng.uniform(-spread, spread, size=n) * Z / 300
    Y = rng.uniform(-spread, spread, size=n) * Z / 300
    return np.stack([X, Y, Z], axis=1)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from claas.nn import Batch, ModelSpec  # noqa: E402
from claas.scenario import build_nc_scenario, synth_blobs  # noqa: E402


@pytest.fixture
def small_spec():
    return ModelSpec(input_dim=4, hidden_layers=(8,), num_classes=6, activation="relu", seed=3)


@pytest.fixture
def small_scenario():
    train, test = synth_blobs(6, 4, 40, 10, 0.3, seed=5)
    return build_nc_scenario(train, test, 6, 2, 2, 3, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_batch(n, f, c, seed=0):
    r = np.random.default_rng(seed)
    return Batch(r.normal(size=(n, f)), r.integers(0, c, n))


def service_config(**overrides):
    cfg = {
        "experiment_id": "exp",
        "model": {"input_dim": 6, "hidden_layers": [16], "num_classes": 8, "seed": 11},
        "strategy": {"name": "replay", "epochs": 2, "batch_size": 16, "lr": 0.05, "memory_size": 5000},
        "scenario": {
            "first_size": 2,
            "rest_size": 2,
            "n_experiences": 4,
            "seed": 1,
            "synthetic": {"per_class_train": 30, "per_class_test": 10, "spread": 0.4, "seed": 1},
        },
        "trigger": {"mode": "every_n_experiences", "n": 1},
        "evaluation": {"top_k": [1, 5], "protocol": "accumulating_test"},
        "runs": 2,
    }
    cfg.update(overrides)
    return cfg


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "claas_acceptance", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

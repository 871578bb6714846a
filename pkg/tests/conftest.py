from pathlib import Path

import numpy as np
import pytest

from leaderpomo.policy import AttentionPolicy, PolicyConfig
from leaderpomo.training import TrainConfig, train_main

DATA = Path(__file__).resolve().parents[1] / "src" / "leaderpomo" / "data"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA


@pytest.fixture(scope="session")
def tsp6_checkpoint():
    """A briefly trained TSP6 policy: better than random, far from optimal."""
    cfg = TrainConfig(size=6, num_starts=6, batch_size=16, steps_main=60, alpha=5.0, seed=3, report_interval=20)
    ckpt, _ = train_main(cfg, oracle=False)
    return ckpt


@pytest.fixture(scope="session")
def tsp6_policy(tsp6_checkpoint):
    return tsp6_checkpoint.policy()


@pytest.fixture
def tsp_policy_f64():
    return AttentionPolicy(PolicyConfig(kind="tsp", embed_dim=16, num_heads=2, ff_dim=24), seed=5, dtype=np.float64)


@pytest.fixture
def cvrp_policy_f64():
    return AttentionPolicy(PolicyConfig(kind="cvrp", embed_dim=16, num_heads=2, ff_dim=24), seed=6, dtype=np.float64)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

import os
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("sigctrl", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("sigctrl")
torch.set_num_threads(1)

# criterion lines collected by test_acceptance.py and printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def desk_cancer(tmp_path_factory):
    """Desk-scale cancer run (800/128 trajectories, 2000 training steps), trained once per session.

    ``SIGCTRL_DESK_DIR`` may point at a directory produced by ``sigctrl simulate`` + ``sigctrl train``
    with the same config to skip retraining during development.
    """
    from sigctrl import bench

    cfg = bench.ExperimentConfig(task="cancer", lambdas=[0.0, 100.0], n_initial_conditions=10).resolved()
    reuse = os.environ.get("SIGCTRL_DESK_DIR")
    if reuse and bench.checkpoint_path(Path(reuse)).exists():
        return cfg, Path(reuse)
    out = tmp_path_factory.mktemp("desk_cancer")
    bench.run_simulate(cfg, out, log=lambda m: None)
    bench.run_train(cfg, out, log=lambda m: None)
    return cfg, out

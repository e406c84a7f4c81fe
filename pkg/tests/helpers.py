"""Small shared fixtures-by-hand: a tiny experiment config and a CLI pipeline driver."""
from pathlib import Path

import yaml
from click.testing import CliRunner

from sigctrl.cli import main

SUBCOMMANDS = ("simulate", "train", "optimize", "evaluate", "library")

TINY = {
    "task": "cancer",
    "seed": 3,
    "lambdas": [0.0, 10.0],
    "n_initial_conditions": 1,
    "data": {"n_train": 6, "n_val": 4},
    "model": {"drift_layers": 1, "drift_hidden": 4, "diff_hidden": 2},
    "train": {"steps": 4, "batch": 2, "m": 2, "val_every": 2, "val_size": 2},
    "optimizer": {"iterations": 2, "mc_n": 2, "K_admin": 2},
    "evaluation": {"rollouts": 2, "mmd_rollouts": 2},
    "library": {"size": 4, "model_rollouts": 2, "eval_rollouts": 2, "seeds": [0, 1]},
}


def write_config(path: Path, cfg: dict = TINY) -> Path:
    path.write_text(yaml.safe_dump(cfg))
    return path


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


def run_pipeline(config: Path, out: Path, seed=None) -> list:
    extra = [] if seed is None else ["--seed", seed]
    results = []
    for cmd in SUBCOMMANDS:
        results.append(invoke(cmd, "--config", config, "--out", out, *extra))
        if results[-1].exit_code != 0:
            break
    return results


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

"""``sigctrl`` command line: simulate | train | optimize | evaluate | library.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numeric failure.
"""
from __future__ import annotations

import sys
from pathlib import Path

import click
import torch

from . import bench
from .errors import ConfigInvalid, MissingArtifact, NumericError

EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 2, 3, 4


def _log(msg: str) -> None:
    click.echo(msg, err=True)


def _run(step, config: str, out: str, seed: int | None, full_scale: bool) -> None:
    torch.set_num_threads(1)
    try:
        cfg = bench.load_config(config, seed, full_scale)
        Path(out).mkdir(parents=True, exist_ok=True)
        step(cfg, Path(out), _log)
    except ConfigInvalid as exc:
        _log(f"config error: {exc}")
        sys.exit(EXIT_CONFIG)
    except MissingArtifact as exc:
        _log(f"missing artifact: {exc}")
        sys.exit(EXIT_MISSING)
    except NumericError as exc:
        _log(f"numeric failure ({type(exc).__name__}): {exc}")
        sys.exit(EXIT_NUMERIC)


def _common(fn):
    fn = click.option("--full-scale", is_flag=True, help="Use full-scale training/optimization budgets.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the config seed.")(fn)
    fn = click.option("--out", required=True, type=click.Path(file_okay=False), help="Artifact directory.")(fn)
    fn = click.option("--config", required=True, type=click.Path(dir_okay=False), help="YAML experiment config.")(fn)
    return fn


@click.group()
def main():
    """Conservative treatment-plan optimization benchmark."""


@main.command()
@_common
def simulate(config, out, seed, full_scale):
    """Generate train/val datasets from the ground-truth simulator."""
    _run(bench.run_simulate, config, out, seed, full_scale)


@main.command(name="train")
@_common
def train_cmd(config, out, seed, full_scale):
    """Fit the neural SDE on the simulated training split."""
    _run(bench.run_train, config, out, seed, full_scale)


@main.command()
@_common
def optimize(config, out, seed, full_scale):
    """Optimize plans for every initial condition and lambda."""
    _run(bench.run_optimize, config, out, seed, full_scale)


@main.command()
@_common
def evaluate(config, out, seed, full_scale):
    """Ground-truth costs, regularizer values and MMD for the optimized plans."""
    _run(bench.run_evaluate, config, out, seed, full_scale)


@main.command()
@_common
def library(config, out, seed, full_scale):
    """Rank a random control library by predicted cost against true cost."""
    _run(bench.run_library, config, out, seed, full_scale)


if __name__ == "__main__":
    main()

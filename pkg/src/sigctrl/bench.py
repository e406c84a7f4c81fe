"""Experiment pipeline behind the CLI: simulate, train, optimize, evaluate, rank a control library.

Every random draw comes from a named stream ``derive(seed, name, *index)`` so any number in a
report can be recomputed from the config and its seed. Ground-truth evaluation only ever sees the
simulator (``TaskConfig``); model predictions only ever see a ``Dynamics`` or a SINDy model.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import platform
import zlib
from pathlib import Path
from typing import Literal

import numpy as np
import scipy
import scipy.stats
import torch
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import __version__
from . import control as C
from . import plans as P
from . import simulators as sim
from .dynamics import Dynamics
from .errors import ConfigInvalid, DegenerateConstantInput, LengthMismatch, MissingArtifact
from .mcmd import ConditioningSpec, fit_from_dataset, regularizer_value
from .model import NetSdeSpec, TrainConfig, as_dynamics, load_checkpoint, save_checkpoint, train
from .paths import _atomic_write_text, load_dataset, make_path, save_dataset
from .sigkernel import SigKernelConfig, StaticKernelSpec, mmd_squared_tensor, paths_to_tensor
from .sindy import sindy_fit, sindy_predict_cost

REPORT_FORMAT = "sigctrl-report/1"

# desk-scale and full-scale values for settings that differ between the two
TRAIN_LR = {"cancer": 1e-4, "covid": 1e-3}
DESK = {"train_steps": {"cancer": 2000, "covid": 4000}, "opt_iterations": 250, "opt_lr": {"cancer": 1e-2, "covid": 1e-2}}
FULL = {"train_steps": {"cancer": 15000, "covid": 30000}, "opt_iterations": 5000, "opt_lr": {"cancer": 1e-3, "covid": 1e-2}}


# Config ------------------------------------------------------------------------


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    n_train: int | None = Field(None, ge=1)  # cancer 800, covid 500
    n_val: int | None = Field(None, ge=2)  # cancer 128, covid 480
    mask_fraction: float = Field(0.3, ge=0.0, lt=1.0)


class ModelSection(_Section):
    drift_layers: int = Field(3, ge=1)
    drift_hidden: int = Field(64, ge=1)
    diff_layers: int = Field(1, ge=1)
    diff_hidden: int = Field(8, ge=1)
    s_max: float = Field(1.0, gt=0)


class TrainSection(_Section):
    steps: int | None = Field(None, ge=1)  # desk 2000/4000, full 15000/30000
    lr: float | None = Field(None, gt=0)  # cancer 1e-4, covid 1e-3
    batch: int = Field(16, ge=1)
    m: int = Field(8, ge=2)
    val_every: int = Field(200, ge=1)
    val_size: int = Field(32, ge=1)


class KernelSection(_Section):
    static: Literal["rbf", "linear"] = "rbf"
    bandwidth: float = Field(1.0, gt=0)
    dyadic_order: int = Field(1, ge=0)

    def config(self) -> SigKernelConfig:
        return SigKernelConfig(StaticKernelSpec(self.static, self.bandwidth), self.dyadic_order)


class McmdSection(_Section):
    ridge: float = Field(1e-3, gt=0)
    intervals: int = Field(1, ge=1)
    x0_bandwidth: float = Field(1.0, gt=0)
    mode: Literal["rollout", "paired"] = "rollout"


class OptimizerSection(_Section):
    lr: float | None = Field(None, gt=0)  # desk 1e-2, full 1e-3 cancer / 1e-2 covid
    iterations: int | None = Field(None, ge=1)  # desk 250, full 5000
    mc_n: int = Field(10, ge=1)
    K_admin: int | None = Field(None, ge=1)  # 5 cancer, 1 covid
    lam_x_opt: float = Field(1e-3, ge=0)
    lam_x_report: float = Field(1.0, ge=0)


class EvaluationSection(_Section):
    rollouts: int = Field(20, ge=2)
    mmd_rollouts: int = Field(20, ge=2)


class LibrarySection(_Section):
    size: int = Field(100, ge=2)
    model: Literal["learned", "true", "sindy"] = "learned"
    model_rollouts: int = Field(20, ge=1)
    eval_rollouts: int = Field(20, ge=1)
    seeds: list[int] = Field(default_factory=lambda: [0])


class CovidTargetSection(_Section):
    t_star: float = 2.0
    dose: float = Field(5.0, ge=0)
    rollouts: int = Field(20, ge=1)


class ExperimentConfig(_Section):
    task: Literal["cancer", "covid"]
    objective: Literal["cancer-explicit", "cancer-relative", "covid-track"] | None = None
    seed: int = Field(0, ge=0)
    lambdas: list[float] = Field(default_factory=lambda: [0.0, 1.0, 10.0, 100.0])
    n_initial_conditions: int = Field(15, ge=1)
    relative_target: float = Field(0.3, gt=0)
    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    kernel: KernelSection = Field(default_factory=KernelSection)
    mcmd: McmdSection = Field(default_factory=McmdSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    library: LibrarySection = Field(default_factory=LibrarySection)
    covid_target: CovidTargetSection = Field(default_factory=CovidTargetSection)
    full_scale: bool = False

    @model_validator(mode="after")
    def _check(self):
        if any(l < 0 for l in self.lambdas) or not self.lambdas:
            raise ValueError("lambdas must be a non-empty list of nonnegative values")
        if self.objective is not None and self.objective.startswith("cancer") != (self.task == "cancer"):
            raise ValueError(f"objective {self.objective} does not belong to task {self.task}")
        return self

    def resolved(self, full_scale: bool | None = None) -> "ExperimentConfig":
        """Fill task-dependent defaults; the result has no ``None`` left in it."""
        full = self.full_scale if full_scale is None else full_scale
        scale = FULL if full else DESK
        base = sim.task_config(self.task)
        d = self.model_dump()
        d["full_scale"] = full
        d["objective"] = d["objective"] or ("cancer-relative" if self.task == "cancer" else "covid-track")
        d["data"]["n_train"] = d["data"]["n_train"] or base.n_train
        d["data"]["n_val"] = d["data"]["n_val"] or base.n_val
        d["train"]["steps"] = d["train"]["steps"] or scale["train_steps"][self.task]
        d["train"]["lr"] = d["train"]["lr"] or TRAIN_LR[self.task]
        d["optimizer"]["iterations"] = d["optimizer"]["iterations"] or scale["opt_iterations"]
        d["optimizer"]["lr"] = d["optimizer"]["lr"] or scale["opt_lr"][self.task]
        d["optimizer"]["K_admin"] = d["optimizer"]["K_admin"] or (5 if self.task == "cancer" else 1)
        return ExperimentConfig.model_validate(d)

    def digest(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path, seed: int | None = None, full_scale: bool = False) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigInvalid(f"config file {path} does not exist") from exc
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigInvalid(f"config file {path} must hold a mapping")
    if seed is not None:
        raw["seed"] = seed
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigInvalid(f"invalid config {path}:\n{exc}") from exc
    return cfg.resolved(full_scale or cfg.full_scale)


# Seeds and helpers -------------------------------------------------------------


def derive(seed: int, name: str, *index: int) -> int:
    """Deterministic 62-bit seed for the stream ``(seed, name, *index)``."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), *[int(i) for i in index]])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(2))


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(derive(seed, name, *index))


def spearman(predicted, truth) -> float:
    """Rank correlation with average ranks for ties."""
    a = np.asarray(predicted, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"{a.shape} predicted vs {b.shape} true values")
    if len(a) < 2:
        raise LengthMismatch("need at least two values")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise DegenerateConstantInput("rank correlation is undefined for a constant input")
    return float(scipy.stats.spearmanr(a, b).statistic)


def provenance(cfg: ExperimentConfig) -> dict:
    return {
        "seed": cfg.seed,
        "config_hash": cfg.digest(),
        "full_scale": cfg.full_scale,
        "versions": {"sigctrl": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "torch": torch.__version__.split("+")[0]},
    }


def write_json(path: Path, doc: dict) -> None:
    _atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=False, allow_nan=True) + "\n")


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    _atomic_write_text(path, buf.getvalue())


def _read_json(path: Path, what: str) -> dict:
    if not path.exists():
        raise MissingArtifact(f"{what} not found at {path}; run the upstream subcommand first")
    with open(path) as fh:
        return json.load(fh)


def task_of(cfg: ExperimentConfig) -> sim.TaskConfig:
    return sim.task_config(cfg.task, n_train=cfg.data.n_train, n_val=cfg.data.n_val,
                           mask_fraction=cfg.data.mask_fraction)


def true_dynamics(task: sim.TaskConfig) -> Dynamics:
    return Dynamics(sim.true_model(task), task.grid, None, "simulator")


def objective_for(cfg: ExperimentConfig, task: sim.TaskConfig, ic: int, x0, report: bool = False,
                  name: str | None = None) -> C.ObjectiveSpec:
    name = name or cfg.objective
    if name == "cancer-explicit":
        return C.cancer_explicit()
    if name == "cancer-relative":
        return C.cancer_relative(cfg.relative_target)
    return C.covid_track(covid_target(cfg, task, ic, x0),
                         cfg.optimizer.lam_x_report if report else cfg.optimizer.lam_x_opt)


def covid_target(cfg: ExperimentConfig, task: sim.TaskConfig, ic: int, x0) -> np.ndarray:
    """Tracking target: mean of true rollouts from ``x0`` under the reference single-shot plan."""
    ref = P.covid_single_shot(cfg.covid_target.t_star, cfg.covid_target.dose, task.covid.k_kel)
    dyn = true_dynamics(task)
    rng = stream(cfg.seed, "covid-target", ic)
    u = torch.as_tensor(P.step_controls(ref, dyn.grid))
    with torch.no_grad():
        states = dyn.simulate(x0, u, dyn.noise(rng, cfg.covid_target.rollouts))
    return states.mean(0).numpy()


def initial_conditions(cfg: ExperimentConfig, task: sim.TaskConfig, n: int | None = None, name: str = "ic") -> list[np.ndarray]:
    n = cfg.n_initial_conditions if n is None else n
    return [sim.sample_initial(task, stream(cfg.seed, name, i), planning=True) for i in range(n)]


# Directories --------------------------------------------------------------------


def data_dir(out: Path) -> Path:
    return Path(out) / "data"


def checkpoint_path(out: Path) -> Path:
    return Path(out) / "model" / "checkpoint.json"


def plans_path(out: Path) -> Path:
    return Path(out) / "plans" / "plans.json"


def _load_split(out: Path, split: str):
    d = data_dir(out) / split
    if not (d / "manifest.json").exists():
        raise MissingArtifact(f"dataset split {split!r} not found under {data_dir(out)}; run `sigctrl simulate` first")
    return load_dataset(d)


def _load_model(cfg: ExperimentConfig, out: Path, task: sim.TaskConfig) -> Dynamics:
    path = checkpoint_path(out)
    if not path.exists():
        raise MissingArtifact(f"model checkpoint not found at {path}; run `sigctrl train` first")
    model, norm, _ = load_checkpoint(path)
    return as_dynamics(model, task.grid, norm)


# Subcommands --------------------------------------------------------------------


def run_simulate(cfg: ExperimentConfig, out: Path, log=print) -> dict:
    task = task_of(cfg)
    train_ds, val_ds = sim.generate_dataset(task, derive(cfg.seed, "data"))
    save_dataset(train_ds, data_dir(out) / "train")
    save_dataset(val_ds, data_dir(out) / "val")
    log(f"simulated {len(train_ds)} train / {len(val_ds)} val {cfg.task} trajectories into {data_dir(out)}")
    return {"n_train": len(train_ds), "n_val": len(val_ds)}


def net_spec(cfg: ExperimentConfig, task: sim.TaskConfig) -> NetSdeSpec:
    d_x = 2 if task.task == "cancer" else 4
    d_u = 2 if task.task == "cancer" else 1
    m = cfg.model
    return NetSdeSpec(d_x, d_u, m.drift_layers, m.drift_hidden, m.diff_layers, m.diff_hidden, s_max=m.s_max)


def run_train(cfg: ExperimentConfig, out: Path, log=print) -> dict:
    task = task_of(cfg)
    train_ds, val_ds = _load_split(out, "train"), _load_split(out, "val")
    t = cfg.train
    tcfg = TrainConfig(lr=t.lr, steps=t.steps, batch=t.batch, m=t.m, seed=derive(cfg.seed, "train"),
                       val_every=t.val_every, val_size=t.val_size)
    res = train(net_spec(cfg, task), train_ds, val_ds, task.grid, tcfg, cfg.kernel.config(), log)
    save_checkpoint(res.model, train_ds.norm, checkpoint_path(out),
                    {"best_step": res.best_step, "best_val": res.best_val, "config_hash": cfg.digest()})
    _atomic_write_text(checkpoint_path(out).parent / "trace.csv", res.trace_csv())
    log(f"trained {t.steps} steps; best validation score {res.best_val:.6g} at step {res.best_step}")
    return {"best_step": res.best_step, "best_val": res.best_val}


def anchor_fits(cfg: ExperimentConfig, val_ds) -> list:
    t0, tf = val_ds.interval
    partition = list(np.linspace(t0, tf, cfg.mcmd.intervals + 1))
    kcfg = cfg.kernel.config()
    return fit_from_dataset(val_ds, cfg.mcmd.ridge, ConditioningSpec(cfg.mcmd.x0_bandwidth, kcfg), kcfg, partition)


def make_regularizer(cfg: ExperimentConfig, val_ds, dyn: Dynamics, ic: int, fits=None):
    """Regularizer anchored on the validation split; ``fits`` can be shared across runs."""
    fits = anchor_fits(cfg, val_ds) if fits is None else fits
    model_paths = None
    if cfg.mcmd.mode == "paired":
        from .mcmd import anchor_model_paths

        model_paths = anchor_model_paths(fits, dyn, val_ds, stream(cfg.seed, "anchor-paths", ic))
    return C.Regularizer(fits, cfg.mcmd.mode, model_paths)


def run_optimize(cfg: ExperimentConfig, out: Path, log=print) -> dict:
    task = task_of(cfg)
    val_ds = _load_split(out, "val")
    dyn = _load_model(cfg, out, task)
    o = cfg.optimizer
    records = []
    fits = anchor_fits(cfg, val_ds) if any(l > 0 for l in cfg.lambdas) else None
    for i, x0 in enumerate(initial_conditions(cfg, task)):
        spec = objective_for(cfg, task, i, x0)
        for k, lam in enumerate(cfg.lambdas):
            reg = make_regularizer(cfg, val_ds, dyn, i, fits) if lam > 0 else None
            ocfg = C.OptimizerConfig(o.lr, o.iterations, o.mc_n, lam, derive(cfg.seed, "optimize", i), o.K_admin)
            res = C.optimize_plan(dyn, x0, spec, ocfg, reg, task.family)
            name = f"trace_ic{i:02d}_lam{k:02d}.csv"
            _atomic_write_text(plans_path(out).parent / name, res.trace_csv())
            records.append({
                "ic": i, "x0": [float(v) for v in x0], "lambda": float(lam), "plan": res.plan.to_dict(),
                "objective": res.objective, "best_iteration": res.iteration, "trace": name,
                "clipped": None if res.clips is None else res.clips.count,
                "regularizer_evaluations": None if res.clips is None else res.clips.evaluations,
                "optimizer_seed": ocfg.seed,
            })
            log(f"ic {i} lambda {lam:g}: objective {res.objective:.6g} at iteration {res.iteration}")
    doc = {"format": "sigctrl-plans/1", "task": cfg.task, "objective": cfg.objective,
           "provenance": provenance(cfg), "records": records}
    write_json(plans_path(out), doc)
    return doc


def ground_truth_costs(cfg: ExperimentConfig, task: sim.TaskConfig, records: list[dict]) -> list[float]:
    """True-simulator cost of each plan under the reporting objective.

    Plans for the same initial condition share one noise stream (common random numbers), so
    lambda comparisons are paired; the stream is independent of anything the optimizer saw.
    """
    dyn = true_dynamics(task)
    out = []
    for j, r in enumerate(records):
        x0 = np.asarray(r["x0"])
        spec = objective_for(cfg, task, r["ic"], x0, report=True)
        plan = P.ControlPlan.from_dict(r["plan"])
        out.append(C.estimate_cost(dyn, x0, plan, spec, cfg.evaluation.rollouts, stream(cfg.seed, "evaluate", r["ic"])).mean)
    return out


def _paths_tensor(states: torch.Tensor, grid_times: np.ndarray, obs_times: np.ndarray, norm, kcfg, interval):
    idx = np.rint((obs_times - grid_times[0]) / (grid_times[1] - grid_times[0])).astype(int)
    z = norm.encode_state(states[:, idx]).numpy()
    return paths_to_tensor([make_path(obs_times, v) for v in z], kcfg, interval, len(obs_times))


def model_diagnostics(cfg: ExperimentConfig, task: sim.TaskConfig, dyn: Dynamics, val_ds, records: list[dict]) -> list[dict]:
    """Regularizer value at each plan and the MMD^2 between true and model path laws under it."""
    kcfg = cfg.kernel.config()
    true_dyn = true_dynamics(task)
    nodes = task.grid.nodes()
    n = cfg.evaluation.mmd_rollouts
    out = []
    reg_cache = {}
    fits = anchor_fits(cfg, val_ds)
    for j, r in enumerate(records):
        x0 = np.asarray(r["x0"])
        plan = P.ControlPlan.from_dict(r["plan"])
        if r["ic"] not in reg_cache:
            reg_cache[r["ic"]] = make_regularizer(cfg, val_ds, dyn, r["ic"], fits)
        reg = reg_cache[r["ic"]]
        R = regularizer_value(dyn, plan, x0, reg.fits, cfg.optimizer.mc_n, stream(cfg.seed, "reg-eval", j),
                              reg.mode, reg.model_paths)
        u = torch.as_tensor(P.step_controls(plan, task.grid))
        with torch.no_grad():
            xt = true_dyn.simulate(x0, u, true_dyn.noise(stream(cfg.seed, "mmd-true", j), n))
            xm = dyn.simulate(x0, u, dyn.noise(stream(cfg.seed, "mmd-model", j), n))
            A = _paths_tensor(xt, nodes, task.obs_times, val_ds.norm, kcfg, val_ds.interval)
            B = _paths_tensor(xm, nodes, task.obs_times, val_ds.norm, kcfg, val_ds.interval)
            mmd2 = float(mmd_squared_tensor(A, B, kcfg))
        out.append({"regularizer": R, "mmd2": mmd2})
    return out


def run_evaluate(cfg: ExperimentConfig, out: Path, log=print) -> dict:
    task = task_of(cfg)
    doc = _read_json(plans_path(out), "optimized plans")
    records = doc["records"]
    truth = ground_truth_costs(cfg, task, records)
    diag = model_diagnostics(cfg, task, _load_model(cfg, out, task), _load_split(out, "val"), records)
    base = {r["ic"]: truth[j] for j, r in enumerate(records) if r["lambda"] == 0}
    rows, per = [], []
    for j, r in enumerate(records):
        b = base.get(r["ic"])
        rel = (truth[j] - b) / b if b not in (None, 0) else None
        rec = {"ic": r["ic"], "lambda": r["lambda"], "true_cost": truth[j], "relative_improvement": rel,
               "regularizer": diag[j]["regularizer"], "mmd2": diag[j]["mmd2"], "eval_stream": ["evaluate", r["ic"]]}
        per.append(rec)
        rows.append([r["ic"], r["lambda"], truth[j], "" if rel is None else rel, diag[j]["regularizer"], diag[j]["mmd2"]])
    summary = []
    for lam in cfg.lambdas:
        c = [p["true_cost"] for p in per if p["lambda"] == lam]
        summary.append({"lambda": lam, "median_true_cost": float(np.median(c)), "mean_true_cost": float(np.mean(c)),
                        "n": len(c)})
    report = {
        "format": REPORT_FORMAT, "kind": "evaluate", "task": cfg.task, "objective": cfg.objective,
        "provenance": provenance(cfg), "per_plan": per, "summary": summary,
        "notes": ["desk-scale numbers; absolute costs are not comparable to full-scale published values"
                  if not cfg.full_scale else "full-scale settings"],
    }
    rep_dir = Path(out) / "report"
    write_json(rep_dir / "report.json", report)
    write_csv(rep_dir / "evaluate.csv", ["ic", "lambda", "true_cost", "relative_improvement", "regularizer", "mmd2"], rows)
    for s in summary:
        log(f"lambda {s['lambda']:g}: median true cost {s['median_true_cost']:.6g} over {s['n']} runs")
    return report


def library_predictions(cfg: ExperimentConfig, predictor, x0, plans: list, spec, lib_seed: int) -> list[float]:
    """Predicted cost per plan; every plan reuses one noise stream so rankings compare like with like."""
    out = []
    for j, plan in enumerate(plans):
        if isinstance(predictor, Dynamics):
            rng = stream(cfg.seed, "library-predict", lib_seed)
            out.append(C.estimate_cost(predictor, x0, plan, spec, cfg.library.model_rollouts, rng).mean)
        else:
            out.append(predictor(x0, plan, spec))
    return out


def library_truth(cfg: ExperimentConfig, task: sim.TaskConfig, x0, plans: list, spec, lib_seed: int) -> list[float]:
    dyn = true_dynamics(task)
    return [C.estimate_cost(dyn, x0, plan, spec, cfg.library.eval_rollouts,
                            stream(cfg.seed, "library-truth", lib_seed)).mean for plan in plans]


def build_predictor(cfg: ExperimentConfig, task: sim.TaskConfig, out: Path):
    kind = cfg.library.model
    if kind == "true":
        return true_dynamics(task)
    if kind == "learned":
        return _load_model(cfg, out, task)
    model = sindy_fit(_load_split(out, "train"), _load_split(out, "val"))
    return lambda x0, plan, spec: sindy_predict_cost(model, x0, plan, spec, task.grid)


def run_library(cfg: ExperimentConfig, out: Path, log=print, predictor=None) -> dict:
    task = task_of(cfg)
    predictor = build_predictor(cfg, task, out) if predictor is None else predictor
    per_seed, rows = [], []
    for s in cfg.library.seeds:
        x0 = sim.sample_initial(task, stream(cfg.seed, "library-ic", s), planning=True)
        plans = P.sample_control_library(task.family, cfg.library.size, stream(cfg.seed, "library", s),
                                         (task.t0, task.tf), cfg.optimizer.K_admin)
        spec = objective_for(cfg, task, 10_000 + s, x0, report=True)
        pred = library_predictions(cfg, predictor, x0, plans, spec, s)
        truth = library_truth(cfg, task, x0, plans, spec, s)
        rho = spearman(pred, truth)
        pick = int(np.argmin(pred))
        per_seed.append({"library_seed": s, "x0": [float(v) for v in x0], "spearman": rho, "selected": pick,
                         "selected_true_cost": truth[pick], "best_true_cost": float(np.min(truth)),
                         "predicted": pred, "true": truth})
        rows += [[s, j, pred[j], truth[j]] for j in range(len(plans))]
        log(f"library seed {s}: spearman {rho:.4f}; selected plan true cost {truth[pick]:.6g}")
    rhos = [p["spearman"] for p in per_seed]
    report = {
        "format": REPORT_FORMAT, "kind": "library", "task": cfg.task, "objective": cfg.objective,
        "model": cfg.library.model, "provenance": provenance(cfg), "per_seed": per_seed,
        "summary": {"median_spearman": float(np.median(rhos)), "mean_spearman": float(np.mean(rhos)), "n": len(rhos)},
    }
    lib_dir = Path(out) / "library"
    write_json(lib_dir / "report.json", report)
    write_csv(lib_dir / "library.csv", ["library_seed", "plan", "predicted_cost", "true_cost"], rows)
    return report

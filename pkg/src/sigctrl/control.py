"""Objectives, Monte-Carlo cost estimates and single-shooting plan optimization.

Every cost here is in raw units and is computed on the solver grid of the dynamics that
produced the states: the control penalty uses the per-step (cell-average) inputs with a
rectangle rule, the state-tracking integrand uses the trapezoidal rule over grid nodes.
Both rules are additive over sub-intervals that start and end on grid nodes, which is what
the telescoping check relies on.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from . import plans as P
from .dynamics import Dynamics
from .errors import DivergedOptimization, HorizonMismatch, NonFiniteGradient
from .mcmd import ClipLog, CmeFit, plan_control_tensor, regularizer_from_states
from .paths import TimedPath
from .sde import SolverGrid

DTYPE = torch.float64

TASKS = ("cancer-explicit", "cancer-relative", "covid-track", "terminal-target", "quadratic-state")


@dataclass(frozen=True, eq=False)
class ObjectiveSpec:
    """``J = scale * (int f(x, u) dt + g(x_T) + offset)`` with

    ``f = sum_c lam_u[c] u_c^2 + lam_x |x - target(t)|^2`` and
    ``g = terminal_weight * (x_T[0] - v*)^2``, where ``v* = relative_target * x0[0]`` when
    ``relative_target`` is set and ``terminal_target`` otherwise.
    """

    task: str
    lam_u: tuple = (1e-3, 1e-3)
    lam_x: float = 0.0
    target: np.ndarray | None = None
    terminal_weight: float = 1.0
    terminal_target: float = 0.0
    relative_target: float | None = None
    offset: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown objective {self.task!r}")
        if any(l < 0 for l in self.lam_u) or self.lam_x < 0 or self.terminal_weight < 0:
            raise ValueError("objective weights must be nonnegative")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def with_lam_x(self, lam_x: float) -> "ObjectiveSpec":
        return replace(self, lam_x=lam_x)

    def to_dict(self) -> dict:
        return {
            "task": self.task, "lam_u": list(self.lam_u), "lam_x": self.lam_x,
            "target": None if self.target is None else np.asarray(self.target).tolist(),
            "terminal_weight": self.terminal_weight, "terminal_target": self.terminal_target,
            "relative_target": self.relative_target, "offset": self.offset, "scale": self.scale,
        }


def cancer_explicit(lam_c: float = 1e-3, lam_r: float = 1e-3) -> ObjectiveSpec:
    return ObjectiveSpec("cancer-explicit", (lam_c, lam_r))


def cancer_relative(ratio: float = 0.3, lam_c: float = 1e-3, lam_r: float = 1e-3) -> ObjectiveSpec:
    return ObjectiveSpec("cancer-relative", (lam_c, lam_r), relative_target=ratio)


def covid_track(target: np.ndarray, lam_x: float = 1e-3, lam_u: float = 0.0) -> ObjectiveSpec:
    """Track ``target`` (solver-grid nodes x state); no terminal cost and by default no control penalty."""
    return ObjectiveSpec("covid-track", (lam_u,), lam_x=lam_x, target=np.asarray(target, dtype=np.float64),
                         terminal_weight=0.0)


def terminal_target(target: float, lam_u: float = 1e-3) -> ObjectiveSpec:
    return ObjectiveSpec("terminal-target", (lam_u,), terminal_target=target)


def quadratic_state(lam_x: float = 1.0, terminal_weight: float = 1.0, dim: int = 1) -> ObjectiveSpec:
    """``int lam_x |x|^2 dt + terminal_weight * x_T[0]^2`` with no control penalty."""
    return ObjectiveSpec("quadratic-state", (0.0,) * dim, lam_x=lam_x, terminal_weight=terminal_weight)


# Cost evaluation ---------------------------------------------------------------


def running_cost_t(states: torch.Tensor, u_steps: torch.Tensor, times: np.ndarray, spec: ObjectiveSpec,
                   target: torch.Tensor | None = None) -> torch.Tensor:
    """Unscaled running cost per path. ``states`` ``(B, n+1, d_x)``, ``u_steps`` ``(n, d_u)`` or ``(B, n, d_u)``."""
    dt = torch.as_tensor(np.diff(np.asarray(times, dtype=np.float64)))
    lam_u = torch.as_tensor(spec.lam_u, dtype=DTYPE)
    if u_steps.shape[-1] != lam_u.shape[0]:
        raise ValueError(f"objective has {lam_u.shape[0]} control weights, controls have {u_steps.shape[-1]}")
    cu = ((u_steps * u_steps) * lam_u).sum(-1) @ dt
    total = cu.expand(states.shape[0]) if cu.dim() == 0 else cu
    if spec.lam_x > 0:
        diff = states if target is None else states - target
        sq = (diff * diff).sum(-1)
        total = total + spec.lam_x * (0.5 * (sq[:, 1:] + sq[:, :-1]) * dt).sum(-1)
    return total


def terminal_cost_t(x_T: torch.Tensor, x0_raw, spec: ObjectiveSpec) -> torch.Tensor:
    if spec.terminal_weight == 0:
        return torch.zeros(x_T.shape[0], dtype=DTYPE)
    if spec.relative_target is not None:
        v = spec.relative_target * float(np.asarray(x0_raw, dtype=np.float64).reshape(-1)[0])
    else:
        v = spec.terminal_target
    return spec.terminal_weight * (x_T[:, 0] - v) ** 2


def _target_t(spec: ObjectiveSpec, n_nodes: int) -> torch.Tensor | None:
    if spec.target is None:
        return None
    tgt = torch.as_tensor(spec.target, dtype=DTYPE)
    if tgt.shape[0] != n_nodes:
        raise HorizonMismatch(f"tracking target has {tgt.shape[0]} nodes, states have {n_nodes}")
    return tgt


def path_costs_t(states: torch.Tensor, u_steps: torch.Tensor, times: np.ndarray, spec: ObjectiveSpec,
                 x0_raw) -> torch.Tensor:
    """Per-path ``J`` for raw-unit states on the solver grid ``times``."""
    tgt = _target_t(spec, states.shape[1])
    J = running_cost_t(states, u_steps, times, spec, tgt) + terminal_cost_t(states[:, -1], x0_raw, spec)
    return spec.scale * (J + spec.offset)


def cost_of_path(path: TimedPath, plan: P.ControlPlan, spec: ObjectiveSpec, x0_raw=None,
                 horizon: tuple[float, float] | None = None) -> float:
    """Cost of one raw-unit state path sampled on a uniform grid that spans the horizon."""
    t = path.times
    if horizon is not None and (not math.isclose(t[0], horizon[0]) or not math.isclose(t[-1], horizon[1])):
        raise HorizonMismatch(f"path spans [{t[0]}, {t[-1]}], objective horizon is {tuple(horizon)}")
    if path.n_points < 2:
        raise HorizonMismatch("a path needs at least two points to define a cost")
    grid = SolverGrid(float(t[0]), float(t[-1]), path.n_points - 1)
    if not np.allclose(grid.nodes(), t, rtol=0, atol=1e-9 * max(1.0, abs(t[-1]))):
        raise HorizonMismatch("cost_of_path needs a uniformly sampled path")
    u = torch.as_tensor(P.step_controls(plan, grid))
    x0 = path.values[0] if x0_raw is None else x0_raw
    with torch.no_grad():
        return float(path_costs_t(torch.tensor(path.values)[None], u, t, spec, x0)[0])


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    stderr: float
    n: int


def _estimate(costs: torch.Tensor) -> CostEstimate:
    c = costs.detach().numpy()
    se = float(c.std(ddof=1) / math.sqrt(len(c))) if len(c) > 1 else float("nan")
    return CostEstimate(float(c.mean()), se, len(c))


def estimate_cost(dyn: Dynamics, x0_raw, plan: P.ControlPlan, spec: ObjectiveSpec, mc_n: int,
                  rng: np.random.Generator) -> CostEstimate:
    """Monte-Carlo estimate of ``E[J]`` under ``dyn`` from ``mc_n`` rollouts."""
    if mc_n < 1:
        raise ValueError("mc_n must be >= 1")
    grid = dyn.grid
    u = torch.as_tensor(P.step_controls(plan, grid))
    with torch.no_grad():
        states = dyn.simulate(x0_raw, u, dyn.noise(rng, mc_n))
        return _estimate(path_costs_t(states, u, grid.nodes(), spec, x0_raw))


@dataclass(eq=False)
class Regularizer:
    """MCMD regularizer over a partition; each ``fits[j]`` covers one partition interval."""

    fits: Sequence[CmeFit]
    mode: str = "rollout"
    model_paths: Sequence[torch.Tensor] | None = None
    clips: ClipLog = field(default_factory=ClipLog)

    def value_t(self, states_raw: torch.Tensor, grid_times: np.ndarray, family: str, timepoints: torch.Tensor,
                dosages: torch.Tensor, x0_raw, plan_width=1.0, k_kel=1.0, cap=None) -> torch.Tensor:
        controls = [plan_control_tensor(family, timepoints, dosages, f.control_times, f.control_width, f.norm,
                                        f.spec.control, f.interval, plan_width, k_kel, cap) for f in self.fits]
        return regularizer_from_states(self.fits, states_raw, grid_times, controls, x0_raw, self.mode,
                                       self.model_paths, self.clips)


@dataclass(frozen=True)
class ConservativeCost:
    total: float
    cost: float
    regularizer: float
    stderr: float


def _objective_t(dyn: Dynamics, x0_raw, family: str, tp: torch.Tensor, ds: torch.Tensor, template: P.ControlPlan,
                 spec: ObjectiveSpec, lam: float, reg: Regularizer | None, noise: np.ndarray):
    grid = dyn.grid
    u = P.window_average_t(family, tp, ds, grid.nodes()[:-1], grid.dt, template.width, template.k_kel, template.cap)
    states = dyn.simulate(x0_raw, u, noise)
    costs = path_costs_t(states, u, grid.nodes(), spec, x0_raw)
    J = costs.mean()
    if lam == 0 or reg is None:
        return J, J, None, costs
    R = reg.value_t(states, grid.nodes(), family, tp, ds, x0_raw, template.width, template.k_kel, template.cap)
    return J + lam * R, J, R, costs


def conservative_cost(dyn: Dynamics, x0_raw, plan: P.ControlPlan, spec: ObjectiveSpec, lam: float,
                      reg: Regularizer | None, mc_n: int, rng: np.random.Generator) -> ConservativeCost:
    """``E[J] + lam * R`` with ``R`` computed from the same rollouts as the cost term.

    With ``lam == 0`` the regularizer is never evaluated, so the value equals ``estimate_cost``
    under the same generator state exactly.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    noise = dyn.noise(rng, mc_n)
    with torch.no_grad():
        total, J, R, costs = _objective_t(dyn, x0_raw, plan.family, torch.tensor(plan.timepoints),
                                          torch.tensor(plan.dosages), plan, spec, lam, reg, noise)
    est = _estimate(costs)
    r = 0.0 if R is None else float(R)
    return ConservativeCost(est.mean if R is None else est.mean + lam * r, est.mean, r, est.stderr)


# Optimization ------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    iterations: int = 5000
    mc_n: int = 10
    lam: float = 0.0
    seed: int = 0
    K_admin: int | None = None
    init_dose: tuple = (0.1, 0.3)

    def __post_init__(self):
        if not self.lr > 0 or self.iterations < 1 or self.mc_n < 1 or self.lam < 0:
            raise ValueError("invalid optimizer settings")


@dataclass
class OptimizationResult:
    plan: P.ControlPlan
    objective: float
    iteration: int
    trace: list = field(default_factory=list)
    clips: ClipLog | None = None

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "objective", "cost", "regularizer", "best_objective"])
        for row in self.trace:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def initial_plan(family: str, interval: tuple[float, float], rng: np.random.Generator, K: int | None = None,
                 dose_range=(0.1, 0.3), **kw) -> P.ControlPlan:
    return P.sample_control_library(family, 1, rng, interval, K, dose_range, **kw)[0]


def optimize_plan(dyn: Dynamics, x0_raw, spec: ObjectiveSpec, cfg: OptimizerConfig,
                  reg: Regularizer | None = None, family: str = P.CANCER, init: P.ControlPlan | None = None,
                  template: P.ControlPlan | None = None, log=None) -> OptimizationResult:
    """Single shooting with RMSProp over (timepoints, normalized dosages).

    Both groups are optimized in ``[0, 1]`` coordinates (timepoints as a fraction of the horizon)
    and projected back into the box after each step. Each iteration draws fresh Brownian noise;
    the returned plan is the iterate with the lowest sampled objective.
    """
    rng = np.random.default_rng(cfg.seed)
    grid = dyn.grid
    t0, tf = grid.t0, grid.tf
    if init is None:
        init = initial_plan(family, (t0, tf), rng, cfg.K_admin, cfg.init_dose)
    family = init.family
    template = template or init
    hi = torch.as_tensor(P.DOSE_BOUNDS[family][1], dtype=DTYPE)[:, None]
    span = tf - t0
    s = torch.tensor((init.timepoints - t0) / span).clamp(0.0, 1.0).requires_grad_(True)
    d = (torch.tensor(init.dosages) / hi).clamp(0.0, 1.0).requires_grad_(True)
    opt = torch.optim.RMSprop([s, d], lr=cfg.lr)

    def to_plan(s_, d_):
        return P.ControlPlan(family, (t0 + span * s_.detach()).numpy(), (d_.detach() * hi).numpy(),
                             template.width, template.k_kel, template.cap)

    best = (math.inf, -1, to_plan(s, d))
    trace = []
    for it in range(cfg.iterations):
        noise = dyn.noise(rng, cfg.mc_n)
        opt.zero_grad()
        total, J, R, _ = _objective_t(dyn, x0_raw, family, t0 + span * s, d * hi, template, spec, cfg.lam, reg, noise)
        val = float(total.detach())
        if not math.isfinite(val):
            raise DivergedOptimization(f"objective became {val} at iteration {it}")
        if val < best[0]:
            best = (val, it, to_plan(s, d))
        trace.append((it, val, float(J.detach()), 0.0 if R is None else float(R.detach()), best[0]))
        total.backward()
        for p in (s, d):
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteGradient(f"non-finite plan gradient at iteration {it}")
        opt.step()
        with torch.no_grad():
            s.clamp_(0.0, 1.0)
            d.clamp_(0.0, 1.0)
        if log is not None and (it % 100 == 0 or it == cfg.iterations - 1):
            log(f"iter {it} objective {val:.6g} best {best[0]:.6g}")
    return OptimizationResult(best[2], best[0], best[1], trace, reg.clips if reg is not None else None)


def save_plan(path, plan: P.ControlPlan, **extra) -> None:
    from .paths import _atomic_write_text

    _atomic_write_text(path, json.dumps({"format": "sigctrl-plan/1", "plan": plan.to_dict(), **extra}, indent=2))


def load_plan(path) -> P.ControlPlan:
    from .errors import MissingArtifact

    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise MissingArtifact(str(path)) from exc
    return P.ControlPlan.from_dict(doc["plan"])


# Telescoping check -------------------------------------------------------------


@dataclass(frozen=True)
class TelescopeResult:
    direct: float
    direct_se: float
    telescoped: float
    terms: tuple
    term_se: tuple

    @property
    def combined_se(self) -> float:
        return math.sqrt(self.direct_se ** 2 + sum(s * s for s in self.term_se))

    @property
    def gap(self) -> float:
        return abs(self.direct - self.telescoped)


def _segment(dyn: Dynamics, x_start: torch.Tensor, u: torch.Tensor, lo: int, hi: int, noise: np.ndarray) -> torch.Tensor:
    sub = SolverGrid(float(dyn.grid.nodes()[lo]), float(dyn.grid.nodes()[hi]), hi - lo)
    return replace(dyn, grid=sub).simulate(x_start, u[lo:hi], noise)


def telescope_check(true_dyn: Dynamics, model_dyn: Dynamics, x0_raw, plan: P.ControlPlan, spec: ObjectiveSpec,
                    partition: Sequence[float], mc_n: int, rng: np.random.Generator,
                    inner: int = 32) -> TelescopeResult:
    """Compare ``J_true - J_model`` estimated directly and as a sum of per-interval terms.

    With hybrid processes ``H_j`` (model up to ``t_j``, true afterwards), ``H_0`` is the true
    process and ``H_K`` the model, so ``J_true - J_model = sum_j (J(H_j) - J(H_{j+1}))``. Term ``j``
    starts both branches from the same model state at ``t_j``, runs the true and model dynamics on
    ``[t_j, t_{j+1}]`` with shared noise, and values the remainder by ``inner`` true rollouts.
    """
    grid = true_dyn.grid
    if model_dyn.grid.n_steps != grid.n_steps or model_dyn.grid.t0 != grid.t0 or model_dyn.grid.tf != grid.tf:
        raise HorizonMismatch("true and model dynamics must share a solver grid")
    idx = [int(i) for i in grid.index_of(np.asarray(partition, dtype=np.float64))]
    if idx[0] != 0 or idx[-1] != grid.n_steps or any(b <= a for a, b in zip(idx[:-1], idx[1:])):
        raise HorizonMismatch("partition must run from t0 to tf through solver nodes")
    nodes = grid.nodes()
    u = torch.as_tensor(P.step_controls(plan, grid))
    tgt = _target_t(spec, grid.n_steps + 1)
    x0 = torch.as_tensor(np.asarray(x0_raw, dtype=np.float64))

    def run(states, lo, hi):
        tg = None if tgt is None else tgt[lo:hi + 1]
        return running_cost_t(states, u[lo:hi], nodes[lo:hi + 1], spec, tg)

    with torch.no_grad():
        noise = true_dyn.noise(rng, mc_n)
        xt = true_dyn.simulate(x0, u, noise)
        xm = model_dyn.simulate(x0, u, noise)
        diff = (path_costs_t(xt, u, nodes, spec, x0_raw) - path_costs_t(xm, u, nodes, spec, x0_raw)).numpy()
        direct, direct_se = float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(mc_n))

        terms, ses = [], []
        n_int = len(idx) - 1
        for j in range(n_int):
            a, b = idx[j], idx[j + 1]
            pre = model_dyn.noise(rng, mc_n)[:, :a] if a > 0 else None
            start = _segment(model_dyn, x0.expand(mc_n, -1), u, 0, a, pre)[:, -1] if a > 0 else x0.expand(mc_n, -1)
            seg_noise = true_dyn.noise(rng, mc_n)[:, a:b]
            st = _segment(true_dyn, start, u, a, b, seg_noise)
            sm = _segment(model_dyn, start, u, a, b, seg_noise)
            h_t = run(st, a, b)
            h_m = run(sm, a, b)
            if b == grid.n_steps:
                h_t = h_t + terminal_cost_t(st[:, -1], x0_raw, spec)
                h_m = h_m + terminal_cost_t(sm[:, -1], x0_raw, spec)
            else:
                post = true_dyn.noise(rng, mc_n * inner)[:, b:]
                for br, h in ((st, "t"), (sm, "m")):
                    ends = br[:, -1].repeat_interleave(inner, dim=0)
                    tail = _segment(true_dyn, ends, u, b, grid.n_steps, post)
                    cont = (run(tail, b, grid.n_steps) + terminal_cost_t(tail[:, -1], x0_raw, spec))
                    cont = cont.reshape(mc_n, inner).mean(1)
                    if h == "t":
                        h_t = h_t + cont
                    else:
                        h_m = h_m + cont
            dj = (spec.scale * (h_t - h_m)).numpy()
            terms.append(float(dj.mean()))
            ses.append(float(dj.std(ddof=1) / math.sqrt(mc_n)))
    return TelescopeResult(direct, direct_se, float(sum(terms)), tuple(terms), tuple(ses))

"""SINDy with control: polynomial library, STLSQ, and plan-cost prediction by RK4.

Library columns are ordered as the constant followed by monomials of increasing degree; within a
degree, monomials are the ``itertools.combinations_with_replacement`` of the variables
``(x_1..x_dx, u_1..u_du)`` in that order. For one state and one control at degree 2 this gives
``[1, x, u, x^2, x u, u^2]``.

Fitting happens in the dataset's normalized coordinates. Derivative targets are secant slopes
over each point's neighbours; the state entering that row is the trapezoid mean over the same
window and the control is the plan's exact average over it. For dynamics linear in (x, u) the
row is then exact up to quadrature error, including across dose-pulse edges.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import plans as P
from .control import ObjectiveSpec, path_costs_t
from .errors import ShapeMismatch
from .paths import Dataset, NormStats
from .sde import SolverGrid, rk4_integrate

DEGREES = (1, 2)
THRESHOLDS = (0.1, 0.2, 0.5)
RIDGES = (0.1, 0.2, 0.5)


@dataclass(frozen=True)
class SindyConfig:
    degree: int = 2
    threshold: float = 0.1
    ridge: float = 0.1
    max_iter: int = 20

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.threshold < 0 or self.ridge < 0:
            raise ValueError("threshold and ridge must be >= 0")


def default_grid() -> list[SindyConfig]:
    return [SindyConfig(d, t, r) for d in DEGREES for t in THRESHOLDS for r in RIDGES]


def library_terms(d_x: int, d_u: int, degree: int) -> list[tuple[int, ...]]:
    """Variable-index tuples per column; ``()`` is the constant term."""
    terms = [()]
    for deg in range(1, degree + 1):
        terms.extend(itertools.combinations_with_replacement(range(d_x + d_u), deg))
    return terms


def term_names(d_x: int, d_u: int, degree: int) -> list[str]:
    names = [f"x{i}" for i in range(d_x)] + [f"u{i}" for i in range(d_u)]
    out = []
    for term in library_terms(d_x, d_u, degree):
        if not term:
            out.append("1")
            continue
        parts = []
        for v, grp in itertools.groupby(term):
            k = len(list(grp))
            parts.append(names[v] if k == 1 else f"{names[v]}^{k}")
        out.append(" ".join(parts))
    return out


def build_library(states, controls, degree: int) -> np.ndarray:
    X = np.atleast_2d(np.asarray(states, dtype=np.float64))
    U = np.atleast_2d(np.asarray(controls, dtype=np.float64))
    if X.shape[0] != U.shape[0]:
        raise ShapeMismatch(f"{X.shape[0]} state rows but {U.shape[0]} control rows")
    Z = np.concatenate([X, U], axis=1)
    cols = [np.prod(Z[:, list(t)], axis=1) if t else np.ones(Z.shape[0]) for t in library_terms(X.shape[1], U.shape[1], degree)]
    return np.stack(cols, axis=1)


@dataclass(frozen=True)
class StlsqResult:
    coef: np.ndarray
    no_active_terms: bool
    iterations: int
    converged: bool


def _ridge_solve(A: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    if A.shape[1] == 0:
        return np.zeros(0)
    if ridge == 0:
        return np.linalg.lstsq(A, y, rcond=None)[0]
    return np.linalg.solve(A.T @ A + ridge * np.eye(A.shape[1]), A.T @ y)


def stlsq(library, derivatives, threshold: float, ridge: float, max_iter: int = 20) -> StlsqResult:
    """Sequentially thresholded ridge regression, one target column at a time.

    Each pass refits on the surviving columns and drops coefficients below ``threshold``; it stops
    when the active set no longer changes. All-zero results are valid and flagged.
    """
    A = np.asarray(library, dtype=np.float64)
    Y = np.asarray(derivatives, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if A.shape[0] != Y.shape[0]:
        raise ShapeMismatch(f"library has {A.shape[0]} rows, targets have {Y.shape[0]}")
    if A.shape[0] < A.shape[1] and ridge == 0:
        raise ShapeMismatch("fewer rows than library columns needs ridge > 0")
    coef = np.zeros((A.shape[1], Y.shape[1]))
    iters, converged = 0, True
    for j in range(Y.shape[1]):
        active = np.ones(A.shape[1], dtype=bool)
        done = False
        for it in range(max_iter):
            c = _ridge_solve(A[:, active], Y[:, j], ridge)
            keep = np.abs(c) >= threshold
            iters = max(iters, it + 1)
            if keep.all():
                coef[active, j] = c
                done = True
                break
            idx = np.flatnonzero(active)
            active[idx[~keep]] = False
            if not active.any():
                done = True
                break
        if not done:
            converged = False
            coef[active, j] = _ridge_solve(A[:, active], Y[:, j], ridge)
    return StlsqResult(coef, not np.any(coef != 0), iters, converged)


@dataclass(frozen=True, eq=False)
class SindyModel:
    coef: np.ndarray
    degree: int
    d_x: int
    d_u: int
    norm: NormStats | None = None
    config: SindyConfig | None = None
    no_active_terms: bool = False
    validation_mse: float = math.nan
    scores: dict = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return term_names(self.d_x, self.d_u, self.degree)

    def rhs(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return (build_library(x[None], u[None], self.degree) @ self.coef)[0]

    def rhs_batch(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        return build_library(X, U, self.degree) @ self.coef

    def equations(self, precision: int = 4) -> str:
        lines = []
        names = self.names
        for j in range(self.d_x):
            parts = []
            for c, n in zip(self.coef[:, j], names):
                if c == 0:
                    continue
                mag = f"{abs(c):.{precision}g}"
                term = mag if n == "1" else f"{mag} {n}"
                parts.append(("- " if c < 0 else "+ ") + term)
            body = " ".join(parts).lstrip("+ ") if parts else "0"
            if body.startswith("- "):
                body = "-" + body[2:]
            lines.append(f"dx{j}/dt = {body}")
        return "\n".join(lines)


def _window_rows(tr, norm: NormStats | None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """State, control and secant-slope rows for one trajectory in its own (normalized) coordinates."""
    t, z = tr.state.times, tr.state.values
    if len(t) < 2:
        return np.zeros((0, z.shape[1])), np.zeros((0, tr.control.dim)), np.zeros((0, z.shape[1]))
    lo = np.concatenate([[0], np.arange(len(t) - 1)])
    hi = np.concatenate([np.arange(1, len(t)), [len(t) - 1]])
    mid = np.arange(len(t))
    w = (t[hi] - t[lo])[:, None]
    dz = (z[hi] - z[lo]) / w
    # trapezoid mean of the state over the same window
    zbar = ((t[mid] - t[lo])[:, None] * (z[lo] + z[mid]) + (t[hi] - t[mid])[:, None] * (z[mid] + z[hi])) / (2 * w)
    plan = P.ControlPlan.from_dict(tr.plan)
    u = np.stack([P.window_average(plan, [t[a]], t[b] - t[a])[0] for a, b in zip(lo, hi)])
    if norm is not None:
        u = norm.encode_control(u)
    return zbar, u, dz


def regression_rows(ds: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    norm = ds.norm if ds.normalized else None
    rows = [_window_rows(tr, norm) for tr in ds]
    return tuple(np.concatenate([r[k] for r in rows]) for k in range(3))


def one_step_mse(model: SindyModel, ds: Dataset) -> float:
    """Mean squared error of one explicit step ``z_i + dt f(z_i, u_i)`` against ``z_{i+1}``."""
    norm = ds.norm if ds.normalized else None
    errs = []
    for tr in ds:
        t, z = tr.state.times, tr.state.values
        if len(t) < 2:
            continue
        plan = P.ControlPlan.from_dict(tr.plan)
        h = np.diff(t)
        u = np.stack([P.window_average(plan, [a], w)[0] for a, w in zip(t[:-1], h)])
        if norm is not None:
            u = norm.encode_control(u)
        pred = z[:-1] + h[:, None] * model.rhs_batch(z[:-1], u)
        errs.append(((pred - z[1:]) ** 2).ravel())
    return float(np.mean(np.concatenate(errs)))


def fit_config(ds: Dataset, cfg: SindyConfig) -> SindyModel:
    X, U, dX = regression_rows(ds)
    res = stlsq(build_library(X, U, cfg.degree), dX, cfg.threshold, cfg.ridge, cfg.max_iter)
    return SindyModel(res.coef, cfg.degree, X.shape[1], U.shape[1], ds.norm if ds.normalized else None, cfg,
                      res.no_active_terms)


def sindy_fit(train: Dataset, val: Dataset | None = None, configs: list[SindyConfig] | None = None) -> SindyModel:
    """Fit every configuration and keep the one with the lowest validation one-step MSE."""
    configs = default_grid() if configs is None else list(configs)
    if val is None and len(configs) > 1:
        raise ValueError("selecting among several configurations needs a validation split")
    best, scores = None, {}
    for cfg in configs:
        m = fit_config(train, cfg)
        score = one_step_mse(m, val) if val is not None else math.nan
        scores[(cfg.degree, cfg.threshold, cfg.ridge)] = score
        if best is None or score < best[0]:
            best = (score, m)
    m = best[1]
    return SindyModel(m.coef, m.degree, m.d_x, m.d_u, m.norm, m.config, m.no_active_terms, best[0], scores)


def sindy_rollout(model: SindyModel, x0_raw, plan: P.ControlPlan, grid: SolverGrid,
                  max_abs: float | None = None) -> np.ndarray:
    """Raw-unit ODE trajectory on ``grid`` under ``plan`` (RK4 with per-step average inputs).

    ``max_abs`` bounds the state in model coordinates (default 1e3 normalized, 1e12 raw).
    """
    if max_abs is None:
        max_abs = 1e3 if model.norm is not None else 1e12
    u = P.step_controls(plan, grid)
    x0 = np.asarray(x0_raw, dtype=np.float64)
    if model.norm is not None:
        u = model.norm.encode_control(u)
        x0 = model.norm.encode_state(x0)
    z = rk4_integrate(model.rhs, x0, u, grid, model.d_u, max_abs)
    return z if model.norm is None else model.norm.decode_state(z)


def sindy_predict_cost(model: SindyModel, x0_raw, plan: P.ControlPlan, spec: ObjectiveSpec, grid: SolverGrid) -> float:
    states = sindy_rollout(model, x0_raw, plan, grid)
    u = torch.as_tensor(P.step_controls(plan, grid))
    return float(path_costs_t(torch.as_tensor(states)[None], u, grid.nodes(), spec, x0_raw)[0])

"""Conditional mean embeddings on path space and the MCMD regularizer.

For anchors ``(x0_i, u_i)`` with observed paths ``X_i`` the kernel-ridge weights are
``beta(x0, u) = (K + n*ridge*I)^{-1} k(x0, u)`` with ``k_i = k_rbf(x0_i, x0) k_sig(u_i, u)``.
Two estimators of the squared discrepancy are provided:

* ``paired``: model paths ``Xhat_i`` attached to each anchor,
  ``beta' (K_X - 2 K_{X,Xhat} + K_Xhat) beta``.
* ``rollout``: ``m`` model rollouts ``Y_j`` from the query itself,
  ``beta' K_X beta - 2 beta' K_{X,Y} 1/m + 1' K_Y 1 / m^2``.

The first one is a pure interpolation of anchor-wise discrepancies; the second compares the
smoothed data embedding at the query with the model's own conditional law there, which is
what grows when a plan moves away from the anchors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import plans as P
from .errors import SingularSystem, SizeMismatch
from .paths import Dataset, NormStats, TimedPath
from .sigkernel import SigKernelConfig, augment_tensor, gram_tensor, pad_stack, paths_to_tensor

DTYPE = torch.float64


@dataclass(frozen=True)
class ConditioningSpec:
    x0_bandwidth: float = 1.0
    control: SigKernelConfig = field(default_factory=SigKernelConfig)


@dataclass
class ClipLog:
    """Counts negative plug-in values clipped to zero before the square root."""

    count: int = 0
    evaluations: int = 0


def rbf_x0(a: torch.Tensor, b: torch.Tensor, bandwidth: float) -> torch.Tensor:
    diff = a[:, None, :] - b[None, :, :]
    return torch.exp(-(diff * diff).sum(-1) / (2.0 * bandwidth ** 2))


@dataclass(frozen=True)
class McmdQuery:
    x0: np.ndarray
    control: TimedPath


def conditioning_kernel(a: tuple, b: tuple, spec: ConditioningSpec = ConditioningSpec(), interval=None) -> float:
    """``k_rbf(x0_a, x0_b) * k_sig(u_a, u_b)`` for pairs ``(x0, control TimedPath)``."""
    xa = torch.as_tensor(np.atleast_1d(np.asarray(a[0], dtype=np.float64)))[None]
    xb = torch.as_tensor(np.atleast_1d(np.asarray(b[0], dtype=np.float64)))[None]
    L = max(a[1].n_points, b[1].n_points)
    U = paths_to_tensor([a[1], b[1]], spec.control, interval, L)
    with torch.no_grad():
        ks = gram_tensor(U[:1], U[1:], spec.control)
        return float(rbf_x0(xa, xb, spec.x0_bandwidth)[0, 0] * ks[0, 0])


@dataclass(frozen=True, eq=False)
class CmeFit:
    x0: torch.Tensor
    controls: torch.Tensor
    K: torch.Tensor
    chol: torch.Tensor
    ridge: float
    spec: ConditioningSpec
    output: SigKernelConfig
    interval: tuple
    true_paths: torch.Tensor | None = None
    K_X: torch.Tensor | None = None
    control_times: np.ndarray | None = None
    control_width: float = 1.0
    state_times: tuple | None = None
    norm: NormStats | None = None

    @property
    def n(self) -> int:
        return self.x0.shape[0]

    def cond_vector(self, x0: torch.Tensor, control: torch.Tensor) -> torch.Tensor:
        """``k((x0_i, u_i), (x0, u))`` over anchors; ``control`` is preprocessed ``(L, d_u + 1)``."""
        kx = rbf_x0(self.x0, x0.reshape(1, -1), self.spec.x0_bandwidth)[:, 0]
        ks = gram_tensor(self.controls, control[None], self.spec.control)[:, 0]
        return kx * ks

    def solve(self, k: torch.Tensor) -> torch.Tensor:
        return torch.cholesky_solve(k[:, None], self.chol)[:, 0]

    def weight_matrix(self) -> torch.Tensor:
        """Explicit ``W`` for inspection; estimators use ``solve``."""
        return torch.cholesky_solve(torch.eye(self.n, dtype=DTYPE), self.chol)


def fit_cme(x0s, controls: torch.Tensor, ridge: float = 1e-3, spec: ConditioningSpec = ConditioningSpec(),
            output: SigKernelConfig = SigKernelConfig(), interval=(0.0, 1.0), true_paths: torch.Tensor | None = None,
            **meta) -> CmeFit:
    """Kernel-ridge conditional mean embedding over ``n`` anchors.

    ``controls`` and ``true_paths`` are preprocessed (time-augmented, padded) tensors.
    """
    x0 = torch.as_tensor(np.asarray(x0s, dtype=np.float64))
    n = x0.shape[0]
    if n < 2:
        raise SizeMismatch("a conditional embedding needs at least 2 anchors")
    if not ridge > 0:
        raise ValueError("ridge must be positive")
    if controls.shape[0] != n or (true_paths is not None and true_paths.shape[0] != n):
        raise SizeMismatch("anchor inputs disagree in length")
    with torch.no_grad():
        kx = rbf_x0(x0, x0, spec.x0_bandwidth)
        kx = 0.5 * (kx + kx.T)
        K = kx * gram_tensor(controls, controls, spec.control, symmetric=True)
        A = K + n * ridge * torch.eye(n, dtype=DTYPE)
        chol, info = torch.linalg.cholesky_ex(A)
        if int(info) != 0:
            raise SingularSystem(f"regularized Gram not positive definite (minor {int(info)})")
        K_X = gram_tensor(true_paths, true_paths, output, symmetric=True) if true_paths is not None else None
    return CmeFit(x0, controls, K, chol, float(ridge), spec, output, tuple(interval), true_paths, K_X, **meta)


def _quadratic(beta: torch.Tensor, M: torch.Tensor, gamma: torch.Tensor | None = None) -> torch.Tensor:
    return beta @ (M @ (beta if gamma is None else gamma))


def mcmd_squared_paired(beta: torch.Tensor, K_X: torch.Tensor, K_XXh: torch.Tensor, K_Xh: torch.Tensor) -> torch.Tensor:
    return _quadratic(beta, K_X) - 2.0 * _quadratic(beta, K_XXh) + _quadratic(beta, K_Xh)


def mcmd_squared_rollout(beta: torch.Tensor, K_X: torch.Tensor, K_XY: torch.Tensor, K_Y: torch.Tensor) -> torch.Tensor:
    return _quadratic(beta, K_X) - 2.0 * (beta @ K_XY).mean() + K_Y.mean()


def mcmd_squared(fit: CmeFit, query: McmdQuery, true_paths: Sequence[TimedPath], model_paths: Sequence[TimedPath]) -> float:
    """Paired plug-in MCMD^2 at ``query``; ``true_paths[i]`` and ``model_paths[i]`` belong to anchor ``i``."""
    if len(true_paths) != fit.n or len(model_paths) != fit.n:
        raise SizeMismatch(f"{fit.n} anchors but {len(true_paths)} true / {len(model_paths)} model paths")
    cfg = fit.output
    L = max(p.n_points for p in list(true_paths) + list(model_paths))
    X = paths_to_tensor(true_paths, cfg, fit.interval, L)
    Xh = paths_to_tensor(model_paths, cfg, fit.interval, L)
    Lu = max(fit.controls.shape[1], query.control.n_points)
    U = paths_to_tensor([query.control], fit.spec.control, fit.interval, Lu)[0]
    with torch.no_grad():
        beta = fit.solve(fit.cond_vector(torch.as_tensor(np.asarray(query.x0, dtype=np.float64)), U))
        K_X = gram_tensor(X, X, cfg, symmetric=True)
        K_Xh = gram_tensor(Xh, Xh, cfg, symmetric=True)
        K_XXh = gram_tensor(X, Xh, cfg)
        return float(mcmd_squared_paired(beta, K_X, K_XXh, K_Xh))


def clipped_root(m2: torch.Tensor, clips: ClipLog | None = None) -> torch.Tensor:
    if clips is not None:
        clips.evaluations += 1
    if float(m2.detach()) <= 0.0:
        if clips is not None:
            clips.count += 1
        return m2 * 0.0
    return torch.sqrt(m2)


# Anchors from a dataset --------------------------------------------------------


def control_grid(interval: tuple[float, float], step: float = 1.0) -> np.ndarray:
    n = int(round((interval[1] - interval[0]) / step))
    return interval[0] + step * np.arange(n + 1)


def plan_control_tensor(family: str, timepoints: torch.Tensor, dosages: torch.Tensor, times: np.ndarray,
                        width: float, norm: NormStats, cfg: SigKernelConfig, interval, plan_width=1.0,
                        k_kel=1.0, cap=None) -> torch.Tensor:
    """Kernel input for a plan: normalized window averages on ``times``, time-augmented."""
    u = P.window_average_t(family, timepoints, dosages, times, width, plan_width, k_kel, cap)
    u = norm.encode_control(u)
    if cfg.time_augment:
        u = augment_tensor(u[None], times, interval[0], interval[1])[0]
    return u


def plan_control(plan: P.ControlPlan, fit: CmeFit, times=None, interval=None) -> torch.Tensor:
    times = fit.control_times if times is None else times
    return plan_control_tensor(plan.family, torch.tensor(plan.timepoints), torch.tensor(plan.dosages), times,
                               fit.control_width, fit.norm, fit.spec.control, interval or fit.interval,
                               plan.width, plan.k_kel, plan.cap)


def _state_tensor(tr, cfg: SigKernelConfig, lo: float, hi: float) -> torch.Tensor:
    """Normalized observed state on ``[lo, hi]``; interior cut points are linearly interpolated."""
    t, v = tr.state.times, tr.state.values
    if lo <= t[0] and hi >= t[-1]:
        tt, vv = t, v
    else:
        tt = np.unique(np.concatenate([[max(lo, t[0])], t[(t > lo) & (t < hi)], [min(hi, t[-1])]]))
        vv = np.stack([np.interp(tt, t, v[:, c]) for c in range(v.shape[1])], axis=1)
    out = torch.tensor(vv, dtype=DTYPE)
    if cfg.time_augment:
        out = augment_tensor(out[None], tt, lo, hi)[0]
    return out


def fit_from_dataset(ds: Dataset, ridge: float = 1e-3, spec: ConditioningSpec = ConditioningSpec(),
                     output: SigKernelConfig = SigKernelConfig(), partition: Sequence[float] | None = None,
                     control_step: float = 1.0) -> list[CmeFit]:
    """One embedding per partition interval, anchored on a normalized dataset (validation split).

    For the interval ``[t_j, t_{j+1}]`` the conditioning state is the observed state interpolated
    at ``t_j`` (``x0`` itself for the first interval) and the control is the plan rendered on
    that interval.
    """
    if not ds.normalized or ds.norm is None:
        raise ValueError("anchors must come from a normalized dataset")
    t0, tf = ds.interval
    partition = [t0, tf] if partition is None else list(partition)
    if partition[0] != t0 or partition[-1] != tf or np.any(np.diff(partition) <= 0):
        raise ValueError("partition must increase from t0 to tf")
    fits = []
    for lo, hi in zip(partition[:-1], partition[1:]):
        times = control_grid((lo, hi), control_step) if (hi - lo) >= control_step else np.array([lo, hi])
        x0s, ctrls, paths = [], [], []
        for tr in ds:
            if lo == t0:
                x0s.append(ds.norm.encode_state(tr.x0))
            else:
                x0s.append([np.interp(lo, tr.state.times, tr.state.values[:, c]) for c in range(tr.state.dim)])
            plan = P.ControlPlan.from_dict(tr.plan)
            ctrls.append(plan_control_tensor(plan.family, torch.tensor(plan.timepoints), torch.tensor(plan.dosages),
                                             times, control_step, ds.norm, spec.control, (lo, hi), plan.width,
                                             plan.k_kel, plan.cap))
            paths.append(_state_tensor(tr, output, lo, hi))
        fits.append(fit_cme(np.array(x0s), pad_stack(ctrls), ridge, spec, output, (lo, hi), pad_stack(paths),
                            control_times=times, control_width=control_step, state_times=None, norm=ds.norm))
    return fits


def rollout_features(fit: CmeFit, states_raw: torch.Tensor, grid_times: np.ndarray, obs_step: float = 1.0) -> torch.Tensor:
    """Model rollouts (raw units, solver grid) as kernel inputs on the interval's daily grid."""
    lo, hi = fit.interval
    times = control_grid((lo, hi), obs_step) if (hi - lo) >= obs_step else np.array([lo, hi])
    dt = grid_times[1] - grid_times[0]
    idx = np.rint((times - grid_times[0]) / dt).astype(int)
    z = fit.norm.encode_state(states_raw[:, idx])
    if fit.output.time_augment:
        z = augment_tensor(z, times, lo, hi)
    return z


def regularizer_from_states(fits: Sequence[CmeFit], states_raw: torch.Tensor, grid_times: np.ndarray,
                            controls: Sequence[torch.Tensor], x0_raw, mode: str = "rollout",
                            model_paths: Sequence[torch.Tensor] | None = None,
                            clips: ClipLog | None = None) -> torch.Tensor:
    """Sum over partition intervals of ``sqrt(max(MCMD^2, 0))``.

    ``controls[j]`` is the query control tensor for interval ``j`` (see ``plan_control``). For
    ``mode="paired"``, ``model_paths[j]`` holds model paths attached to each anchor.
    """
    total = torch.zeros((), dtype=DTYPE)
    for j, fit in enumerate(fits):
        if j == 0:
            xq = fit.norm.encode_state(torch.as_tensor(np.asarray(x0_raw, dtype=np.float64)))
        else:
            k = int(np.rint((fit.interval[0] - grid_times[0]) / (grid_times[1] - grid_times[0])))
            xq = fit.norm.encode_state(states_raw[:, k]).mean(0)
        beta = fit.solve(fit.cond_vector(xq, controls[j]))
        if mode == "rollout":
            Y = rollout_features(fit, states_raw, grid_times)
            L = max(Y.shape[1], fit.true_paths.shape[1])
            Y = pad_stack(list(Y), L)
            m2 = mcmd_squared_rollout(beta, fit.K_X, gram_tensor(fit.true_paths, Y, fit.output),
                                      gram_tensor(Y, Y, fit.output, symmetric=True))
        elif mode == "paired":
            if model_paths is None:
                raise ValueError("paired mode needs model paths attached to the anchors")
            Xh = model_paths[j]
            m2 = mcmd_squared_paired(beta, fit.K_X, gram_tensor(fit.true_paths, Xh, fit.output),
                                     gram_tensor(Xh, Xh, fit.output, symmetric=True))
        else:
            raise ValueError(f"unknown MCMD mode {mode!r}")
        total = total + clipped_root(m2, clips)
    return total


def anchor_model_paths(fits: Sequence[CmeFit], dyn, ds: Dataset, rng: np.random.Generator) -> list[torch.Tensor]:
    """One model rollout per anchor under the anchor's own plan (for ``mode="paired"``)."""
    grid = dyn.grid
    U = np.stack([P.step_controls(P.ControlPlan.from_dict(tr.plan), grid) for tr in ds])
    x0 = np.stack([tr.x0 for tr in ds])
    with torch.no_grad():
        states = dyn.simulate(x0, U, dyn.noise(rng, len(ds)))
    out = []
    for fit in fits:
        Y = rollout_features(fit, states, grid.nodes())
        out.append(pad_stack(list(Y), max(Y.shape[1], fit.true_paths.shape[1])))
    return out


def regularizer_value(dyn, plan: P.ControlPlan, x0_raw, fits: Sequence[CmeFit], mc_n: int,
                      rng: np.random.Generator, mode: str = "rollout", model_paths=None,
                      clips: ClipLog | None = None) -> float:
    """MCMD regularizer of ``plan`` from ``x0_raw`` under ``dyn``, using ``mc_n`` rollouts."""
    grid = dyn.grid
    with torch.no_grad():
        u = torch.as_tensor(P.step_controls(plan, grid))
        states = dyn.simulate(x0_raw, u, dyn.noise(rng, mc_n))
        controls = [plan_control(plan, f) for f in fits]
        return float(regularizer_from_states(fits, states, grid.nodes(), controls, x0_raw, mode, model_paths, clips))

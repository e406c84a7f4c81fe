"""Fixed-step Euler-Maruyama for controlled SDEs.

All arithmetic runs in torch float64 so the same code path serves the ground-truth
simulators and the differentiable model rollouts. Noise is always drawn up front and
passed in, which lets callers replay identical increments across models.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import IntegrationDiverged, NonFiniteState
from .paths import TimedPath, make_path

DTYPE = torch.float64

Tensor = torch.Tensor


@dataclass(frozen=True)
class SolverGrid:
    t0: float
    tf: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1 or not self.tf > self.t0:
            raise ValueError("grid needs n_steps >= 1 and tf > t0")

    @property
    def dt(self) -> float:
        return (self.tf - self.t0) / self.n_steps

    def nodes(self) -> np.ndarray:
        return self.t0 + (self.tf - self.t0) * np.arange(self.n_steps + 1) / self.n_steps

    def index_of(self, times) -> np.ndarray:
        """Grid indices for ``times`` that coincide with nodes (to rounding)."""
        k = np.rint((np.asarray(times, dtype=np.float64) - self.t0) / self.dt).astype(int)
        if np.any(np.abs(self.nodes()[k] - times) > 1e-9 * max(1.0, abs(self.tf))):
            raise ValueError("times are not grid nodes")
        return k

    @classmethod
    def with_step(cls, t0: float, tf: float, dt: float) -> "SolverGrid":
        return cls(t0, tf, int(round((tf - t0) / dt)))


@dataclass(frozen=True)
class SdeModel:
    """Drift/diffusion pair acting on batches.

    ``drift(x, u) -> (B, d_x)``; ``diffusion(x, u) -> (B, d_x, d_w)``, or ``(B, d_x)`` when
    ``diagonal`` (then ``d_w == d_x``). ``lower`` gives per-channel floors applied after each
    step (``None`` entries are not clamped).
    """

    drift: Callable[[Tensor, Tensor], Tensor]
    diffusion: Callable[[Tensor, Tensor], Tensor]
    d_x: int
    d_w: int
    d_u: int
    diagonal: bool = False
    lower: tuple | None = None
    name: str = "sde"

    def floor_tensor(self):
        if self.lower is None:
            return None
        return torch.tensor([-np.inf if v is None else v for v in self.lower], dtype=DTYPE)


def brownian_increments(grid: SolverGrid, d_w: int, rng: np.random.Generator, n_paths: int | None = None):
    """i.i.d. N(0, dt) increments, shape ``(n_steps, d_w)`` or ``(n_paths, n_steps, d_w)``."""
    shape = (grid.n_steps, d_w) if n_paths is None else (n_paths, grid.n_steps, d_w)
    return rng.standard_normal(shape) * np.sqrt(grid.dt)


def control_values(control, grid: SolverGrid, d_u: int) -> Tensor:
    """Per-step control inputs as a ``(1 or B, n_steps, d_u)`` tensor.

    ``control`` is a callable ``t -> vector`` (evaluated at the left node of each step), an
    array/tensor of shape ``(n_steps, d_u)`` or ``(B, n_steps, d_u)``, or ``None`` for zero input.
    """
    if control is None:
        return torch.zeros(1, grid.n_steps, d_u, dtype=DTYPE)
    if callable(control):
        vals = np.array([np.asarray(control(t), dtype=np.float64).reshape(d_u) for t in grid.nodes()[:-1]])
        return torch.as_tensor(vals, dtype=DTYPE)[None]
    u = torch.as_tensor(control, dtype=DTYPE)
    if u.ndim == 2:
        u = u[None]
    if u.shape[1] != grid.n_steps or u.shape[2] != d_u:
        raise ValueError(f"control array of shape {tuple(u.shape)} does not match grid/d_u")
    return u


def integrate(model: SdeModel, x0, control, grid: SolverGrid, noise) -> Tensor:
    """Batched Euler-Maruyama. Returns states on all nodes, shape ``(B, n_steps + 1, d_x)``.

    ``x0`` is ``(d_x,)`` or ``(B, d_x)``; ``noise`` is ``(n_steps, d_w)`` or ``(B, n_steps, d_w)``.
    Differentiable w.r.t. anything the drift/diffusion/control depend on.
    """
    x = torch.as_tensor(x0, dtype=DTYPE)
    if x.ndim == 1:
        x = x[None]
    dW = torch.as_tensor(noise, dtype=DTYPE)
    if dW.ndim == 2:
        dW = dW[None]
    batch = max(x.shape[0], dW.shape[0])
    x = x.expand(batch, model.d_x)
    U = control_values(control, grid, model.d_u)
    U = U.expand(batch, grid.n_steps, model.d_u)
    dW = dW.expand(batch, grid.n_steps, model.d_w)
    floor = model.floor_tensor()
    dt = grid.dt
    states = [x]
    for k in range(grid.n_steps):
        u = U[:, k]
        mu = model.drift(x, u)
        sig = model.diffusion(x, u)
        if model.diagonal:
            x = x + mu * dt + sig * dW[:, k]
        else:
            x = x + mu * dt + torch.einsum("bij,bj->bi", sig, dW[:, k])
        if floor is not None:
            x = torch.maximum(x, floor)
        states.append(x)
    out = torch.stack(states, dim=1)
    _check_finite(out)
    return out


def _check_finite(states: Tensor):
    bad = ~torch.isfinite(states.detach())
    if bad.any():
        per_step = bad.any(dim=2)
        step = int(per_step.any(dim=0).nonzero()[0])
        path = int(per_step[:, step].nonzero()[0])
        raise NonFiniteState(step, path)


def to_paths(states: Tensor, grid: SolverGrid, labels: Sequence[str] | None = None) -> list[TimedPath]:
    t = grid.nodes()
    arr = states.detach().cpu().numpy()
    return [make_path(t, arr[i], labels) for i in range(arr.shape[0])]


def euler_maruyama(model: SdeModel, x0, control, grid: SolverGrid, noise) -> TimedPath:
    """Single path; ``X[t0] == x0`` exactly."""
    noise = np.asarray(noise)
    if noise.ndim != 2:
        raise ValueError("euler_maruyama takes one noise block of shape (n_steps, d_w)")
    with torch.no_grad():
        states = integrate(model, x0, control, grid, noise)
    return to_paths(states, grid)[0]


def rollout_batch(model: SdeModel, x0, control, grid: SolverGrid, n_paths: int, rng: np.random.Generator) -> list[TimedPath]:
    """``n_paths`` independent paths; path ``i`` uses the ``i``-th noise block drawn from ``rng``."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    noise = brownian_increments(grid, model.d_w, rng, n_paths)
    with torch.no_grad():
        states = integrate(model, x0, control, grid, noise)
    return to_paths(states, grid)


def rk4_integrate(rhs: Callable[[np.ndarray, np.ndarray], np.ndarray], x0, control, grid: SolverGrid,
                  d_u: int, max_abs: float = 1e12) -> np.ndarray:
    """Classical RK4 for ``dx/dt = rhs(x, u)`` with the control held constant on each step.

    Returns ``(n_steps + 1, d_x)``. Stops with ``IntegrationDiverged`` when the state leaves
    ``[-max_abs, max_abs]``.
    """
    U = control_values(control, grid, d_u)[0].numpy()
    x = np.asarray(x0, dtype=np.float64).copy()
    h = grid.dt
    out = [x.copy()]
    for k in range(grid.n_steps):
        u = U[k]
        k1 = rhs(x, u)
        k2 = rhs(x + 0.5 * h * k1, u)
        k3 = rhs(x + 0.5 * h * k2, u)
        k4 = rhs(x + h * k3, u)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)) or np.any(np.abs(x) > max_abs):
            raise IntegrationDiverged(f"RK4 integration diverged at step {k + 1}")
        out.append(x.copy())
    return np.array(out)

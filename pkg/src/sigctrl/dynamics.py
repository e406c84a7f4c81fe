"""A dynamics model together with the coordinates it runs in.

Planning code always talks raw units (doses in mg/Gy, volumes in cm^3). A ``Dynamics`` with
``norm`` set runs its SDE in normalized coordinates and converts on the way in and out, which
is how learned models are used; the true simulators have ``norm=None``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .paths import NormStats
from .sde import SdeModel, SolverGrid, brownian_increments, integrate

DTYPE = torch.float64


@dataclass(frozen=True, eq=False)
class Dynamics:
    sde: SdeModel
    grid: SolverGrid
    norm: NormStats | None = None
    label: str = "simulator"

    @property
    def d_x(self) -> int:
        return self.sde.d_x

    @property
    def d_u(self) -> int:
        return self.sde.d_u

    def noise(self, rng: np.random.Generator, n_paths: int) -> np.ndarray:
        return brownian_increments(self.grid, self.sde.d_w, rng, n_paths)

    def simulate(self, x0_raw, u_raw, noise) -> torch.Tensor:
        """Raw-unit states ``(B, n_steps + 1, d_x)`` under per-step raw controls ``u_raw``."""
        x0 = torch.as_tensor(np.asarray(x0_raw, dtype=np.float64)) if not isinstance(x0_raw, torch.Tensor) else x0_raw
        u = torch.as_tensor(u_raw, dtype=DTYPE)
        if self.norm is None:
            return integrate(self.sde, x0, u, self.grid, noise)
        z = integrate(self.sde, self.norm.encode_state(x0), self.norm.encode_control(u), self.grid, noise)
        return self.norm.decode_state(z)

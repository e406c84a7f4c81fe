"""Parameterized open-loop treatment plans.

Two families:

* ``cancer-bangbang``: per channel (chemo, radio) ``u(t) = sum_i dose_i * 1(t in [tau_i, tau_i + width))``.
* ``covid-expdecay``: ``u(t) = sum_i dose_i * 1(t >= tau_i) * exp(-k_kel (t - tau_i))``.
* ``constant``: ``u(t) = sum_i dose_i`` (timepoints unused); a reference family for analytic checks.

Dosages are stored in raw units. Solvers consume window averages of ``u`` over each step; the
averages are continuous (and almost everywhere differentiable) in the timepoints, so the same
torch function serves rendering and gradient-based optimization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DTYPE = torch.float64

CANCER = "cancer-bangbang"
COVID = "covid-expdecay"
CONSTANT = "constant"
FAMILIES = (CANCER, COVID, CONSTANT)

# admissible dose box per family, raw units
DOSE_BOUNDS = {
    CANCER: ((0.0, 0.0), (5.0, 2.0)),
    COVID: ((0.0,), (10.0,)),
    CONSTANT: ((0.0,), (10.0,)),
}


@dataclass(frozen=True, eq=False)
class ControlPlan:
    """``timepoints`` and ``dosages`` have shape ``(channels, K)``. ``cap`` is the per-channel box
    the summed signal is clipped to; ``None`` disables clipping (used to build off-support probes)."""

    family: str
    timepoints: np.ndarray
    dosages: np.ndarray
    width: float = 1.0
    k_kel: float = 1.0
    cap: tuple | None = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown plan family {self.family!r}")
        tp = np.array(self.timepoints, dtype=np.float64, ndmin=2)
        ds = np.array(self.dosages, dtype=np.float64, ndmin=2)
        if tp.shape != ds.shape:
            raise ValueError("timepoints and dosages must have the same shape")
        n_ch = len(DOSE_BOUNDS[self.family][0])
        if tp.shape[0] != n_ch:
            raise ValueError(f"{self.family} plans have {n_ch} channel(s)")
        if np.any(ds < 0):
            raise ValueError("dosages must be nonnegative")
        tp.setflags(write=False)
        ds.setflags(write=False)
        object.__setattr__(self, "timepoints", tp)
        object.__setattr__(self, "dosages", ds)
        if self.cap == ():
            object.__setattr__(self, "cap", DOSE_BOUNDS[self.family][1])

    @property
    def d_u(self) -> int:
        return self.timepoints.shape[0]

    @property
    def K(self) -> int:
        return self.timepoints.shape[1]

    def __call__(self, t: float) -> np.ndarray:
        return render_control(self)(t)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "timepoints": self.timepoints.tolist(),
            "dosages": self.dosages.tolist(),
            "width": self.width,
            "k_kel": self.k_kel,
            "cap": None if self.cap is None else list(self.cap),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ControlPlan":
        cap = d.get("cap", ())
        return cls(d["family"], np.asarray(d["timepoints"]), np.asarray(d["dosages"]),
                   float(d.get("width", 1.0)), float(d.get("k_kel", 1.0)),
                   None if cap is None else tuple(cap))

    def scaled(self, factor: float) -> "ControlPlan":
        """Same timing with dosages multiplied by ``factor`` and clipping disabled."""
        return ControlPlan(self.family, self.timepoints, self.dosages * factor, self.width, self.k_kel, None)


def render_control(plan: ControlPlan):
    """Pointwise ``u(t)`` per the family formula, clipped to ``plan.cap``."""
    tp, ds = plan.timepoints, plan.dosages
    cap = None if plan.cap is None else np.asarray(plan.cap, dtype=np.float64)

    def u(t: float) -> np.ndarray:
        if plan.family == CANCER:
            on = (t >= tp) & (t < tp + plan.width)
            val = (ds * on).sum(axis=1)
        elif plan.family == CONSTANT:
            val = ds.sum(axis=1)
        else:
            dt = t - tp
            val = (ds * np.where(dt >= 0, np.exp(-plan.k_kel * np.maximum(dt, 0.0)), 0.0)).sum(axis=1)
        return val if cap is None else np.minimum(val, cap)

    return u


def window_average_t(family: str, timepoints: torch.Tensor, dosages: torch.Tensor, starts, width: float,
                     plan_width: float = 1.0, k_kel: float = 1.0, cap=None) -> torch.Tensor:
    """Averages of ``u`` over ``[s, s + width]`` for each start ``s``; returns ``(len(starts), channels)``.

    Overlapping pulses add before ``cap`` clips the average.
    """
    s = torch.as_tensor(np.asarray(starts, dtype=np.float64), dtype=DTYPE)[:, None, None]
    e = s + width
    tau = timepoints[None]
    if family == CANCER:
        overlap = torch.clamp(torch.minimum(e, tau + plan_width) - torch.maximum(s, tau), min=0.0)
        val = (dosages[None] * overlap).sum(-1) / width
    elif family == CONSTANT:
        val = dosages.sum(-1)[None].expand(s.shape[0], -1)
    else:
        a = torch.maximum(s, tau) - tau
        b = torch.maximum(e, tau) - tau
        integral = (torch.exp(-k_kel * a) - torch.exp(-k_kel * b)) / k_kel
        val = (dosages[None] * integral).sum(-1) / width
    if cap is not None:
        val = torch.minimum(val, torch.as_tensor(cap, dtype=DTYPE))
    return val


def window_average(plan: ControlPlan, starts, width: float) -> np.ndarray:
    with torch.no_grad():
        return window_average_t(plan.family, torch.tensor(plan.timepoints), torch.tensor(plan.dosages),
                                starts, width, plan.width, plan.k_kel, plan.cap).numpy()


def step_controls(plan: ControlPlan, grid) -> np.ndarray:
    """Per-step solver input ``(n_steps, d_u)``: the average of ``u`` over each step."""
    return window_average(plan, grid.nodes()[:-1], grid.dt)


def sequential_protocol(chemo_dose: float = 5.0, radio_dose: float = 2.0) -> ControlPlan:
    """Weekly chemo in weeks 1-3, then weekly radiotherapy in weeks 4-6."""
    return ControlPlan(CANCER, [[0.0, 7.0, 14.0], [21.0, 28.0, 35.0]],
                       [[chemo_dose] * 3, [radio_dose] * 3])


def concurrent_protocol(chemo_dose: float = 5.0, radio_dose: float = 2.0) -> ControlPlan:
    """Joint chemo and radiotherapy every two weeks over six weeks."""
    return ControlPlan(CANCER, [[0.0, 14.0, 28.0], [0.0, 14.0, 28.0]],
                       [[chemo_dose] * 3, [radio_dose] * 3])


def covid_single_shot(t_star: float, dose: float, k_kel: float = 1.0) -> ControlPlan:
    return ControlPlan(COVID, [[t_star]], [[dose]], k_kel=k_kel)


def plan_from_normalized(family: str, timepoints, norm_dosages, **kw) -> ControlPlan:
    hi = np.asarray(DOSE_BOUNDS[family][1])[:, None]
    return ControlPlan(family, np.asarray(timepoints), np.asarray(norm_dosages) * hi, **kw)


def sample_control_library(family: str, n: int, rng: np.random.Generator, interval: tuple[float, float],
                           K: int | None = None, dose_range=(0.1, 0.3), **kw) -> list[ControlPlan]:
    """``n`` random plans: timepoints uniform on ``interval``, normalized dosages uniform on ``dose_range``."""
    if n < 1:
        raise ValueError("library size must be >= 1")
    if K is None:
        K = 5 if family == CANCER else 1
    n_ch = len(DOSE_BOUNDS[family][0])
    plans = []
    for _ in range(n):
        tp = rng.uniform(interval[0], interval[1], size=(n_ch, K))
        ds = rng.uniform(dose_range[0], dose_range[1], size=(n_ch, K))
        plans.append(plan_from_normalized(family, tp, ds, **kw))
    return plans

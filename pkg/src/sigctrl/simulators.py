"""Ground-truth simulators: lung cancer under chemo/radiotherapy and COVID-19 under dexamethasone.

Cancer growth constants and the stage prior are external values (prior means and stage-wise
tumour-diameter distributions from Geng et al., 2017, as circulated with the Bica et al.
counterfactual-recurrent-network simulator); they are plain defaults and can be overridden.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import plans as P
from .paths import Dataset, Trajectory, fit_norm, make_path, mask_uniform, normalize_dataset
from .sde import SdeModel, SolverGrid, brownian_increments, integrate

DTYPE = torch.float64


def sphere_volume(diameter_cm):
    return math.pi / 6.0 * np.asarray(diameter_cm, dtype=np.float64) ** 3


def sphere_diameter(volume_cm3):
    return np.cbrt(6.0 * np.asarray(volume_cm3, dtype=np.float64) / math.pi)


@dataclass(frozen=True)
class CancerParams:
    rho: float = 7.00e-5
    K_cap: float = float(sphere_volume(30.0))
    beta_c: float = 0.028
    alpha_r: float = 0.0398
    beta_r: float = 0.00398
    k_C: float = 0.5
    sigma_noise: float = 0.1

    def __post_init__(self):
        for name in ("rho", "K_cap", "beta_c", "alpha_r", "beta_r", "k_C"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.sigma_noise < 0:
            raise ValueError("sigma_noise must be >= 0")


@dataclass(frozen=True)
class CovidParams:
    k_dp: float = 1.0
    k_di: float = 1.0
    k_dr: float = 1.0
    k_id: float = 1.0
    k_io: float = 1.0
    k_if: float = 1.0
    k_ep: float = 1.0
    k_cp: float = 1.0
    k_d: float = 1.0
    k_im: float = 1.0
    k_kel: float = 1.0
    h_p: float = 2.0
    h_c: float = 2.0
    sigma_noise: float = 0.1


@dataclass(frozen=True)
class StagePrior:
    """Mixture over stages of lognormal tumour diameters (cm), truncated to ``[lo, hi]``."""

    names: tuple = ("I", "II", "IIIA", "IIIB", "IV")
    weights: tuple = (1432, 128, 1306, 7248, 12840)
    log_mean: tuple = (1.72, 1.96, 1.91, 2.76, 3.86)
    log_sd: tuple = (4.70, 1.63, 9.40, 6.87, 8.82)
    lo: tuple = (0.3, 0.3, 0.3, 0.3, 0.3)
    hi: tuple = (5.0, 13.0, 13.0, 13.0, 13.0)

    def sample_diameter(self, rng: np.random.Generator, restrict: tuple[float, float] | None = None) -> float:
        w = np.asarray(self.weights, dtype=np.float64)
        while True:
            s = rng.choice(len(w), p=w / w.sum())
            d = math.exp(rng.normal(self.log_mean[s], self.log_sd[s]))
            lo, hi = self.lo[s], self.hi[s]
            if restrict is not None:
                lo, hi = max(lo, restrict[0]), min(hi, restrict[1])
            if lo <= d <= hi:
                return d


@dataclass(frozen=True)
class TaskConfig:
    """Horizon, solver step and dataset protocol for one simulator."""

    task: str
    t0: float
    tf: float
    dt: float
    obs_step: float = 1.0
    n_train: int = 800
    n_val: int = 128
    mask_fraction: float = 0.3
    per_condition: int = 1
    covid_times: tuple = (2.0, 5.0, 8.0)
    covid_max_dose: float = 10.0
    covid_x0_rate: float = 100.0
    cancer: CancerParams = field(default_factory=CancerParams)
    covid: CovidParams = field(default_factory=CovidParams)
    stages: StagePrior = field(default_factory=StagePrior)

    @property
    def grid(self) -> SolverGrid:
        return SolverGrid.with_step(self.t0, self.tf, self.dt)

    @property
    def obs_times(self) -> np.ndarray:
        n = int(round((self.tf - self.t0) / self.obs_step))
        return self.t0 + self.obs_step * np.arange(n + 1)

    @property
    def family(self) -> str:
        return P.CANCER if self.task == "cancer" else P.COVID


CANCER_TASK = TaskConfig("cancer", 0.0, 60.0, 0.25)
COVID_TASK = TaskConfig("covid", 0.0, 14.0, 0.05, n_train=500, n_val=480, per_condition=5)


def task_config(task: str, **overrides) -> TaskConfig:
    base = {"cancer": CANCER_TASK, "covid": COVID_TASK}.get(task)
    if base is None:
        raise ValueError(f"unknown task {task!r}")
    return replace(base, **overrides)


def cancer_model(params: CancerParams = CancerParams()) -> SdeModel:
    """State ``(V, C)``, control ``(U_c, U_r)``; multiplicative noise on ``V`` only."""
    p = params

    def drift(x, u):
        V, C = x[:, 0], x[:, 1]
        Uc, Ur = u[:, 0], u[:, 1]
        rate = p.rho * torch.log(p.K_cap / V) - p.beta_c * C - p.alpha_r * Ur - p.beta_r * Ur ** 2
        return torch.stack([rate * V, -p.k_C * C + Uc], dim=1)

    def diffusion(x, u):
        return torch.stack([p.sigma_noise * x[:, 0], torch.zeros_like(x[:, 1])], dim=1)

    return SdeModel(drift, diffusion, d_x=2, d_w=2, d_u=2, diagonal=True, lower=(0.0, 0.0), name="cancer")


def covid_model(params: CovidParams = CovidParams()) -> SdeModel:
    """State ``(viral load, innate, adaptive, dexamethasone)``; diagonal multiplicative noise."""
    p = params

    def drift(x, u):
        x1, x2, x3, x4 = x.unbind(1)
        uc = u[:, 0]
        d1 = p.k_dp * x1 - p.k_di * x1 * x3 ** p.h_c - p.k_dr * x1 * x2
        hill = p.k_ep * x2 ** p.h_p / (p.k_cp ** p.h_p + x2 ** p.h_p)
        d2 = p.k_id * x1 - p.k_io * x2 + p.k_if * x1 * x2 + hill - p.k_d * x4 * x2
        d3 = p.k_im * x2
        d4 = p.k_kel * uc - p.k_kel * x4
        return torch.stack([d1, d2, d3, d4], dim=1)

    def diffusion(x, u):
        return p.sigma_noise * x

    return SdeModel(drift, diffusion, d_x=4, d_w=4, d_u=1, diagonal=True, lower=(0.0,) * 4, name="covid")


def true_model(cfg: TaskConfig) -> SdeModel:
    return cancer_model(cfg.cancer) if cfg.task == "cancer" else covid_model(cfg.covid)


def sample_cancer_protocol(rng: np.random.Generator) -> P.ControlPlan:
    return P.sequential_protocol() if rng.random() < 0.5 else P.concurrent_protocol()


def sample_covid_treatment(rng: np.random.Generator, times=(2.0, 5.0, 8.0), max_dose: float = 10.0,
                           k_kel: float = 1.0) -> P.ControlPlan:
    t_star = float(times[rng.integers(len(times))])
    return P.covid_single_shot(t_star, float(rng.uniform(0.0, max_dose)), k_kel)


def sample_treatment(cfg: TaskConfig, rng: np.random.Generator) -> P.ControlPlan:
    if cfg.task == "cancer":
        return sample_cancer_protocol(rng)
    return sample_covid_treatment(rng, cfg.covid_times, cfg.covid_max_dose, cfg.covid.k_kel)


def sample_initial(task: str | TaskConfig, rng: np.random.Generator, planning: bool = False) -> np.ndarray:
    """Cancer: ``(V0, 0)`` with ``V0`` the volume of a stage-prior diameter (2-5 cm when ``planning``).
    COVID: four i.i.d. exponential components."""
    cfg = task if isinstance(task, TaskConfig) else task_config(task)
    if cfg.task == "cancer":
        d = cfg.stages.sample_diameter(rng, (2.0, 5.0) if planning else None)
        return np.array([float(sphere_volume(d)), 0.0])
    return rng.exponential(1.0 / cfg.covid_x0_rate, size=4)


def simulate(cfg: TaskConfig, x0s: np.ndarray, plans: list[P.ControlPlan], noise: np.ndarray,
             model: SdeModel | None = None) -> np.ndarray:
    """Batch of true-simulator paths on the solver grid, ``(B, n_steps + 1, d_x)``."""
    grid = cfg.grid
    U = np.stack([P.step_controls(p, grid) for p in plans])
    with torch.no_grad():
        states = integrate(model or true_model(cfg), torch.as_tensor(x0s, dtype=DTYPE), U, grid, noise)
    return states.numpy()


def _split(cfg: TaskConfig, n: int, rng: np.random.Generator) -> list[Trajectory]:
    grid = cfg.grid
    model = true_model(cfg)
    obs = cfg.obs_times
    idx = grid.index_of(obs)
    n_cond = -(-n // cfg.per_condition)
    x0s, plans, noise = [], [], []
    for seq in np.random.SeedSequence(int(rng.integers(2 ** 63))).spawn(n_cond):
        prng = np.random.default_rng(seq)
        x0 = sample_initial(cfg, prng)
        plan = sample_treatment(cfg, prng)
        for _ in range(cfg.per_condition):
            x0s.append(x0)
            plans.append(plan)
            noise.append(brownian_increments(grid, model.d_w, prng))
    x0s, plans, noise = np.array(x0s[:n]), plans[:n], np.array(noise[:n])
    states = simulate(cfg, x0s, plans, noise, model)
    mask_rng = np.random.default_rng(int(rng.integers(2 ** 63)))
    s_labels = ("V", "C") if cfg.task == "cancer" else ("viral", "innate", "adaptive", "dex")
    c_labels = ("chemo", "radio") if cfg.task == "cancer" else ("dex_in",)
    out = []
    for i in range(n):
        controls = P.window_average(plans[i], obs, cfg.obs_step)
        full = make_path(obs, states[i][idx], s_labels)
        kept = mask_uniform(full, cfg.mask_fraction, mask_rng).times
        keep = np.searchsorted(obs, kept)
        out.append(Trajectory(
            make_path(kept, full.values[keep], s_labels),
            make_path(kept, controls[keep], c_labels),
            x0s[i].copy(),
            plans[i].to_dict(),
        ))
    return out


def norm_settings(cfg: TaskConfig) -> dict:
    family = cfg.family
    bounds = P.DOSE_BOUNDS[family]
    if cfg.task == "cancer":
        return {"state_transform": "log", "log_shift": (0.0, 1.0), "control_bounds": bounds}
    return {"state_transform": "identity", "log_shift": (), "control_bounds": bounds}


def generate_dataset(cfg: TaskConfig, seed: int, n_train: int | None = None, n_val: int | None = None,
                     mask_fraction: float | None = None) -> tuple[Dataset, Dataset]:
    """Simulate, observe on the daily grid, mask, and normalize with training-split statistics.

    ``x0`` and the administered plan record stay in raw units on each trajectory.
    """
    if mask_fraction is not None:
        cfg = replace(cfg, mask_fraction=mask_fraction)
    n_train = cfg.n_train if n_train is None else n_train
    n_val = cfg.n_val if n_val is None else n_val
    if n_train < 1 or n_val < 1:
        raise ValueError("dataset sizes must be >= 1")
    rng = np.random.default_rng(seed)
    interval = (cfg.t0, cfg.tf)
    meta = {"task": cfg.task, "seed": seed, "mask_fraction": cfg.mask_fraction, "dt": cfg.dt}
    train_raw = Dataset(tuple(_split(cfg, n_train, rng)), interval, meta=dict(meta, split="train"))
    val_raw = Dataset(tuple(_split(cfg, n_val, rng)), interval, meta=dict(meta, split="val"))
    stats = fit_norm(train_raw, **norm_settings(cfg))
    return normalize_dataset(train_raw, stats), normalize_dataset(val_raw, stats)

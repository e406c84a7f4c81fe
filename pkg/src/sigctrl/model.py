"""Neural SDE with one drift and one diffusion network per state, trained by the conditional
signature-kernel score.

Networks are evaluated for all states at once from stacked weights ``(d_x, fan_in, fan_out)``.
``drift_layers`` and ``diff_layers`` count hidden layers; with ``n`` inputs, hidden width ``h``
and ``L`` hidden layers one network has ``n*h + h + (L-1)*(h*h + h) + h + 1`` parameters.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import plans as P
from .dynamics import Dynamics
from .errors import DivergedTraining, MissingArtifact, NonFiniteGradient, SampleTooSmall
from .paths import Dataset, NormStats
from .sde import SdeModel, SolverGrid, brownian_increments, integrate
from .sigkernel import SigKernelConfig, augment_tensor, pad_stack, sig_score_tensor

DTYPE = torch.float64
CHECKPOINT_FORMAT = "sigctrl-netsde/1"


def lipswish(x):
    return 0.909 * torch.nn.functional.silu(x)


@dataclass(frozen=True)
class NetSdeSpec:
    d_x: int
    d_u: int
    drift_layers: int = 3
    drift_hidden: int = 64
    diff_layers: int = 1
    diff_hidden: int = 8
    drift_scale: float = 1.0
    s_max: float = 1.0
    diffusion_uses_control: bool = False
    d_v: int = 0
    init_hidden: int = 32

    def mlp_params(self, n_in: int, hidden: int, layers: int) -> int:
        return n_in * hidden + hidden + (layers - 1) * (hidden * hidden + hidden) + hidden + 1

    def param_count(self) -> int:
        drift = self.mlp_params(self.d_x + self.d_u, self.drift_hidden, self.drift_layers)
        n_diff_in = self.d_x + (self.d_u if self.diffusion_uses_control else 0)
        diff = self.mlp_params(n_diff_in, self.diff_hidden, self.diff_layers)
        init = 0
        if self.d_v > 0:
            init = self.d_v * self.init_hidden + self.init_hidden + self.init_hidden * self.d_x + self.d_x
        return self.d_x * (drift + diff) + init


class StackedMLP(nn.Module):
    """``n_nets`` independent MLPs with scalar output; returns ``(B, n_nets)``."""

    def __init__(self, n_nets: int, n_in: int, hidden: int, layers: int, generator: torch.Generator):
        super().__init__()
        sizes = [n_in] + [hidden] * layers + [1]
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for a, b in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(a)
            w = (torch.rand(n_nets, a, b, generator=generator, dtype=DTYPE) * 2 - 1) * bound
            bias = (torch.rand(n_nets, 1, b, generator=generator, dtype=DTYPE) * 2 - 1) * bound
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(bias))

    def forward(self, inp: torch.Tensor) -> torch.Tensor:
        h = inp.expand(self.weights[0].shape[0], *inp.shape[-2:]) if inp.ndim == 2 else inp
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = torch.baddbmm(b, h, w)
            h = torch.tanh(h) if i == last else lipswish(h)
        return h[..., 0].T

    def zero_final(self):
        with torch.no_grad():
            self.weights[-1].zero_()
            self.biases[-1].zero_()


class NetSde(nn.Module):
    def __init__(self, spec: NetSdeSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        g = torch.Generator().manual_seed(int(seed))
        self.drift_net = StackedMLP(spec.d_x, spec.d_x + spec.d_u, spec.drift_hidden, spec.drift_layers, g)
        n_diff_in = spec.d_x + (spec.d_u if spec.diffusion_uses_control else 0)
        self.diff_net = StackedMLP(spec.d_x, n_diff_in, spec.diff_hidden, spec.diff_layers, g)
        self.init_net = None
        if spec.d_v > 0:
            self.init_net = nn.Sequential(nn.Linear(spec.d_v, spec.init_hidden), nn.SiLU(),
                                          nn.Linear(spec.init_hidden, spec.d_x)).to(DTYPE)

    def drift(self, x, u):
        return self.spec.drift_scale * self.drift_net(torch.cat([x, u], dim=1))

    def diffusion(self, x, u):
        inp = torch.cat([x, u], dim=1) if self.spec.diffusion_uses_control else x
        return self.spec.s_max * 0.5 * (self.diff_net(inp) + 1.0)

    def sde(self) -> SdeModel:
        return SdeModel(self.drift, self.diffusion, self.spec.d_x, self.spec.d_x, self.spec.d_u,
                        diagonal=True, name="netsde")

    def sample_x0(self, v: torch.Tensor) -> torch.Tensor:
        """Initial states from latents (unconditional sampling only)."""
        if self.init_net is None:
            raise ValueError("model was built without an initial-state network (d_v = 0)")
        return self.init_net(v)

    def flat(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.parameters()).detach().clone()

    def load_flat(self, theta):
        nn.utils.vector_to_parameters(torch.as_tensor(theta, dtype=DTYPE), self.parameters())


def forward_rollout(model: NetSde, x0, control, grid: SolverGrid, noise) -> torch.Tensor:
    """Euler-Maruyama rollout in model coordinates, ``(B, n_steps + 1, d_x)``."""
    return integrate(model.sde(), x0, control, grid, noise)


# Batches -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrainBatchData:
    """Pre-rendered training inputs: normalized ``x0``, per-step normalized controls and the
    observed paths as kernel tensors with their grid indices."""

    x0: torch.Tensor
    controls: torch.Tensor
    observed: list
    indices: list
    times: list


def prepare(ds: Dataset, grid: SolverGrid, cfg: SigKernelConfig) -> TrainBatchData:
    if not ds.normalized or ds.norm is None:
        raise ValueError("training needs a normalized dataset")
    t_s, t_f = ds.interval
    x0 = torch.as_tensor(np.stack([ds.norm.encode_state(tr.x0) for tr in ds]))
    U = np.stack([P.step_controls(P.ControlPlan.from_dict(tr.plan), grid) for tr in ds])
    controls = ds.norm.encode_control(torch.as_tensor(U))
    observed, indices, times = [], [], []
    for tr in ds:
        y = torch.tensor(np.asarray(tr.state.values))
        if cfg.time_augment:
            y = augment_tensor(y[None], tr.state.times, t_s, t_f)[0]
        observed.append(y)
        indices.append(grid.index_of(tr.state.times))
        times.append(np.asarray(tr.state.times))
    return TrainBatchData(x0, controls, observed, indices, times)


def loss_conditional_sig_score(model: NetSde, data: TrainBatchData, batch_idx, m: int, grid: SolverGrid,
                               cfg: SigKernelConfig, interval, noise: np.ndarray,
                               include_diagonal: bool = False) -> torch.Tensor:
    """Mean over the batch of the signature score of ``m`` model paths conditioned on each element's
    ``(x0, u)`` against its observed path; model paths are read off at the observed times.

    ``noise`` has shape ``(len(batch_idx) * m, n_steps, d_x)``.
    """
    if m < 2:
        raise SampleTooSmall("the score needs m >= 2")
    b = np.asarray(batch_idx)
    x0 = data.x0[b].repeat_interleave(m, 0)
    u = data.controls[b].repeat_interleave(m, 0)
    states = forward_rollout(model, x0, u, grid, noise)
    t_s, t_f = interval
    total = torch.zeros((), dtype=DTYPE)
    for j, i in enumerate(b):
        block = states[j * m:(j + 1) * m][:, data.indices[i]]
        if cfg.time_augment:
            block = augment_tensor(block, data.times[i], t_s, t_f)
        total = total + sig_score_tensor(block, data.observed[i], cfg, include_diagonal)
    return total / len(b)


def grad(closure, params) -> list[torch.Tensor]:
    """Reverse-mode gradient of ``closure()`` w.r.t. ``params``."""
    params = list(params)
    loss = closure()
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    gs = torch.autograd.grad(loss, params, allow_unused=True)
    gs = [torch.zeros_like(p) if g is None else g for p, g in zip(params, gs)]
    if not all(torch.isfinite(g).all() for g in gs):
        raise NonFiniteGradient("non-finite gradient")
    return gs


# Training ----------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    steps: int = 2000
    batch: int = 16
    m: int = 8
    seed: int = 0
    val_every: int = 200
    val_size: int = 32
    include_diagonal: bool = False

    def __post_init__(self):
        if not (self.lr > 0 and self.steps >= 1 and self.batch >= 1 and self.m >= 2):
            raise ValueError("need lr > 0, steps >= 1, batch >= 1, m >= 2")


@dataclass
class TrainResult:
    model: NetSde
    trace: list = field(default_factory=list)
    val_trace: list = field(default_factory=list)
    best_step: int = 0
    best_val: float = float("inf")

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "val_score"])
        val = dict(self.val_trace)
        for step, loss in self.trace:
            w.writerow([step, repr(loss), repr(val[step]) if step in val else ""])
        return buf.getvalue()


def validation_score(model: NetSde, data: TrainBatchData, idx, m, grid, cfg, interval, seed) -> float:
    rng = np.random.default_rng(seed)
    noise = brownian_increments(grid, model.spec.d_x, rng, len(idx) * m)
    with torch.no_grad():
        return float(loss_conditional_sig_score(model, data, idx, m, grid, cfg, interval, noise))


def train(spec: NetSdeSpec, train_ds: Dataset, val_ds: Dataset, grid: SolverGrid, cfg: TrainConfig,
          kernel: SigKernelConfig = SigKernelConfig(), log=None) -> TrainResult:
    """RMSProp on the conditional score; returns the best-validation parameters."""
    torch.set_num_threads(1)
    model = NetSde(spec, cfg.seed)
    data = prepare(train_ds, grid, kernel)
    vdata = prepare(val_ds, grid, kernel)
    vidx = np.arange(min(cfg.val_size, len(val_ds)))
    opt = torch.optim.RMSprop(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model)
    best = model.flat()
    interval = train_ds.interval
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(len(train_ds), size=min(cfg.batch, len(train_ds)), replace=False)
        noise = brownian_increments(grid, spec.d_x, rng, len(idx) * cfg.m)
        opt.zero_grad()
        loss = loss_conditional_sig_score(model, data, idx, cfg.m, grid, kernel, interval, noise, cfg.include_diagonal)
        if not torch.isfinite(loss):
            raise DivergedTraining(f"non-finite loss at step {step}")
        loss.backward()
        opt.step()
        result.trace.append((step, float(loss.detach())))
        if step % cfg.val_every == 0 or step == cfg.steps:
            v = validation_score(model, vdata, vidx, cfg.m, grid, kernel, interval, cfg.seed + 1)
            result.val_trace.append((step, v))
            if v < result.best_val:
                result.best_val, result.best_step, best = v, step, model.flat()
            if log is not None:
                log(f"step {step} loss {float(loss.detach()):.4f} val {v:.4f}")
    model.load_flat(best)
    return result


def one_step_mse(model: NetSde, ds: Dataset, grid: SolverGrid, n_samples: int = 8, seed: int = 0) -> float:
    """Mean squared error of the model's mean one-observation-ahead prediction (normalized units)."""
    rng = np.random.default_rng(seed)
    U = np.stack([P.step_controls(P.ControlPlan.from_dict(tr.plan), grid) for tr in ds])
    U = ds.norm.encode_control(torch.as_tensor(U))
    errs = []
    sde = model.sde()
    with torch.no_grad():
        for i, tr in enumerate(ds):
            idx = grid.index_of(tr.state.times)
            for a, b, k in zip(tr.state.values[:-1], tr.state.values[1:], range(len(idx) - 1)):
                sub = SolverGrid(float(grid.nodes()[idx[k]]), float(grid.nodes()[idx[k + 1]]), int(idx[k + 1] - idx[k]))
                noise = brownian_increments(sub, model.spec.d_x, rng, n_samples)
                x = integrate(sde, torch.as_tensor(np.array(a)), U[i:i + 1, idx[k]:idx[k + 1]], sub, noise)[:, -1]
                errs.append(float(((x.mean(0).numpy() - b) ** 2).mean()))
    return float(np.mean(errs))


def as_dynamics(model: NetSde, grid: SolverGrid, norm: NormStats) -> Dynamics:
    return Dynamics(model.sde(), grid, norm, label="learned")


# Checkpoints -------------------------------------------------------------------


def save_checkpoint(model: NetSde, norm: NormStats, path, extra: dict | None = None):
    from .paths import _atomic_write_text

    payload = {
        "format": CHECKPOINT_FORMAT,
        "spec": asdict(model.spec),
        "n_params": int(model.spec.param_count()),
        "norm": norm.to_dict(),
        "theta": [repr(float(v)) for v in model.flat()],
        "extra": extra or {},
    }
    _atomic_write_text(Path(path), json.dumps(payload, indent=0, sort_keys=True))


def load_checkpoint(path) -> tuple[NetSde, NormStats, dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"no checkpoint at {path}")
    payload = json.loads(path.read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    model = NetSde(NetSdeSpec(**payload["spec"]))
    model.load_flat(np.array([float(v) for v in payload["theta"]]))
    return model, NormStats.from_dict(payload["norm"]), payload.get("extra", {})

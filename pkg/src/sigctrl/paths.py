"""Irregularly sampled paths, datasets, normalization and on-disk layout.

A dataset split is stored as a directory::

    manifest.json          # format version, interval, channel labels, NormStats, per-trajectory records
    traj_00000.csv         # columns: t, <state channels>, <control channels>
    ...

Floats are written with ``repr`` so a save/load cycle is bit-exact.
"""
from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import (
    DegenerateBounds,
    LengthMismatch,
    MissingArtifact,
    NonFiniteValue,
    NonMonotoneTimes,
    NonPositiveForLog,
    OutOfRange,
    TooFewPointsRemain,
    ZeroVariance,
)

DATASET_FORMAT = "sigctrl-dataset/1"


def _frozen(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TimedPath:
    """Ordered ``(time, vector)`` samples of one trajectory."""

    times: np.ndarray
    values: np.ndarray
    channel_labels: tuple[str, ...] | None = None

    @property
    def n_points(self) -> int:
        return self.times.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def span(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def with_values(self, values) -> "TimedPath":
        return make_path(self.times, values, self.channel_labels)

    def __eq__(self, other):
        if not isinstance(other, TimedPath):
            return NotImplemented
        return (
            np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
            and self.channel_labels == other.channel_labels
        )

    def __repr__(self):
        return f"TimedPath(n_points={self.n_points}, dim={self.dim}, span={self.span})"


def make_path(times, values, channel_labels: Sequence[str] | None = None) -> TimedPath:
    """Validate and build a :class:`TimedPath`.

    ``values`` may be 1-D, in which case it is read as a single channel.
    """
    t = np.asarray(times, dtype=np.float64).reshape(-1)
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if v.ndim != 2 or v.shape[0] != t.shape[0]:
        raise LengthMismatch(f"{t.shape[0]} times but values of shape {v.shape}")
    if t.shape[0] < 2:
        raise LengthMismatch("a path needs at least 2 points")
    if v.shape[1] < 1:
        raise LengthMismatch("a path needs at least one channel")
    if not np.all(np.isfinite(t)) or not np.all(np.diff(t) > 0):
        raise NonMonotoneTimes("times must be finite and strictly increasing")
    if not np.all(np.isfinite(v)):
        raise NonFiniteValue("path values must be finite")
    labels = tuple(channel_labels) if channel_labels is not None else None
    if labels is not None and len(labels) != v.shape[1]:
        raise LengthMismatch(f"{len(labels)} labels for {v.shape[1]} channels")
    return TimedPath(_frozen(t), _frozen(v), labels)


def select_points(path: TimedPath, index) -> TimedPath:
    index = np.asarray(index)
    return make_path(path.times[index], path.values[index], path.channel_labels)


def mask_uniform(path: TimedPath, fraction: float, rng: np.random.Generator) -> TimedPath:
    """Drop ``floor(fraction * (n - 1))`` samples chosen uniformly among all but the first."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    n = path.n_points
    n_drop = int(np.floor(fraction * (n - 1)))
    if n - n_drop < 2:
        raise TooFewPointsRemain(f"masking {n_drop} of {n} points leaves fewer than 2")
    if n_drop == 0:
        return path
    drop = rng.choice(np.arange(1, n), size=n_drop, replace=False)
    keep = np.setdiff1d(np.arange(n), drop)
    return select_points(path, keep)


def linear_interpolate(path: TimedPath, t: float) -> np.ndarray:
    t0, t1 = path.span
    if not t0 <= t <= t1:
        raise OutOfRange(f"t={t} outside [{t0}, {t1}]")
    k = int(np.searchsorted(path.times, t, side="right")) - 1
    if k >= path.n_points - 1:
        return path.values[-1].copy()
    ta, tb = path.times[k], path.times[k + 1]
    if t == ta:
        return path.values[k].copy()
    w = (t - ta) / (tb - ta)
    return (1.0 - w) * path.values[k] + w * path.values[k + 1]


def interpolate_many(path: TimedPath, times) -> np.ndarray:
    """Piecewise-linear evaluation at many times, shape ``(len(times), d)``."""
    times = np.asarray(times, dtype=np.float64)
    t0, t1 = path.span
    if np.any(times < t0) or np.any(times > t1):
        raise OutOfRange("query times outside the path span")
    return np.stack([np.interp(times, path.times, path.values[:, c]) for c in range(path.dim)], axis=1)


def hold_resample(path: TimedPath, times) -> TimedPath:
    """Previous-value hold of ``path`` onto ``times`` (used for dosing signals)."""
    times = np.asarray(times, dtype=np.float64)
    if times[0] < path.times[0]:
        raise OutOfRange("cannot hold before the first sample")
    idx = np.searchsorted(path.times, times, side="right") - 1
    return make_path(times, path.values[idx], path.channel_labels)


def time_augment(path: TimedPath, t_s: float | None = None, t_f: float | None = None) -> TimedPath:
    """Append the channel ``(t - t_s) / (t_f - t_s)``; defaults to the path's own span."""
    if t_s is None:
        t_s = path.times[0]
    if t_f is None:
        t_f = path.times[-1]
    if not t_f > t_s:
        raise ValueError("time augmentation needs t_f > t_s")
    tau = (path.times - t_s) / (t_f - t_s)
    labels = None if path.channel_labels is None else path.channel_labels + ("time",)
    return make_path(path.times, np.column_stack([path.values, tau]), labels)


# Normalization -------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    """Per-channel normalization fitted on the training split.

    States: ``z = (T(x) - mean) / std`` with ``T`` the identity or ``log(x + shift)``.
    Controls: min-max to ``[0, 1]``.
    """

    state_mean: tuple[float, ...]
    state_std: tuple[float, ...]
    control_min: tuple[float, ...]
    control_max: tuple[float, ...]
    state_transform: str = "identity"
    log_shift: tuple[float, ...] = ()

    def __post_init__(self):
        if self.state_transform not in ("identity", "log"):
            raise ValueError(f"unknown state transform {self.state_transform!r}")
        if any(s <= 0 for s in self.state_std):
            raise ZeroVariance("state_std must be positive")
        if any(hi <= lo for lo, hi in zip(self.control_min, self.control_max)):
            raise DegenerateBounds("control_max must exceed control_min")

    def _shift(self, d):
        return np.asarray(self.log_shift if self.log_shift else (0.0,) * d, dtype=np.float64)

    def encode_state(self, x):
        """Normalize raw states; accepts numpy arrays or torch tensors (last axis = channels)."""
        d = len(self.state_mean)
        if isinstance(x, torch.Tensor):
            mean = torch.as_tensor(self.state_mean, dtype=x.dtype)
            std = torch.as_tensor(self.state_std, dtype=x.dtype)
            if self.state_transform == "log":
                x = torch.log(x + torch.as_tensor(self._shift(d), dtype=x.dtype))
            return (x - mean) / std
        x = np.asarray(x, dtype=np.float64)
        if self.state_transform == "log":
            arg = x + self._shift(d)
            if np.any(arg <= 0):
                raise NonPositiveForLog("log transform needs x + shift > 0")
            x = np.log(arg)
        return (x - np.asarray(self.state_mean)) / np.asarray(self.state_std)

    def decode_state(self, z):
        d = len(self.state_mean)
        if isinstance(z, torch.Tensor):
            mean = torch.as_tensor(self.state_mean, dtype=z.dtype)
            std = torch.as_tensor(self.state_std, dtype=z.dtype)
            x = z * std + mean
            if self.state_transform == "log":
                x = torch.exp(x) - torch.as_tensor(self._shift(d), dtype=z.dtype)
            return x
        x = np.asarray(z, dtype=np.float64) * np.asarray(self.state_std) + np.asarray(self.state_mean)
        if self.state_transform == "log":
            x = np.exp(x) - self._shift(d)
        return x

    def encode_control(self, u):
        lo, hi = self.control_min, self.control_max
        if isinstance(u, torch.Tensor):
            lo = torch.as_tensor(lo, dtype=u.dtype)
            hi = torch.as_tensor(hi, dtype=u.dtype)
            return (u - lo) / (hi - lo)
        lo, hi = np.asarray(lo), np.asarray(hi)
        return (np.asarray(u, dtype=np.float64) - lo) / (hi - lo)

    def decode_control(self, v):
        lo, hi = self.control_min, self.control_max
        if isinstance(v, torch.Tensor):
            lo = torch.as_tensor(lo, dtype=v.dtype)
            hi = torch.as_tensor(hi, dtype=v.dtype)
            return v * (hi - lo) + lo
        lo, hi = np.asarray(lo), np.asarray(hi)
        return np.asarray(v, dtype=np.float64) * (hi - lo) + lo

    def to_dict(self) -> dict:
        return {
            "state_mean": list(self.state_mean),
            "state_std": list(self.state_std),
            "control_min": list(self.control_min),
            "control_max": list(self.control_max),
            "state_transform": self.state_transform,
            "log_shift": list(self.log_shift),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            state_mean=tuple(d["state_mean"]),
            state_std=tuple(d["state_std"]),
            control_min=tuple(d["control_min"]),
            control_max=tuple(d["control_max"]),
            state_transform=d["state_transform"],
            log_shift=tuple(d.get("log_shift", ())),
        )


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One patient: observed state and control on a shared grid, the initial state, and
    optionally the administered plan as a serializable record."""

    state: TimedPath
    control: TimedPath
    x0: np.ndarray
    plan: dict | None = None

    def __post_init__(self):
        if not np.array_equal(self.state.times, self.control.times):
            raise LengthMismatch("state and control must share a time grid")


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    interval: tuple[float, float]
    norm: NormStats | None = None
    normalized: bool = False
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]


def fit_norm(
    train: Dataset,
    state_transform: str = "identity",
    log_shift: Sequence[float] = (),
    control_bounds: tuple[Sequence[float], Sequence[float]] | None = None,
) -> NormStats:
    """Fit state statistics on ``train`` (raw units). Control bounds default to the data range."""
    if train.normalized:
        raise ValueError("fit_norm expects a raw (unnormalized) dataset")
    states = np.concatenate([tr.state.values for tr in train])
    if state_transform == "log":
        shift = np.asarray(log_shift if log_shift else np.zeros(states.shape[1]), dtype=np.float64)
        arg = states + shift
        if np.any(arg <= 0):
            raise NonPositiveForLog("log transform needs x + shift > 0 on the training set")
        states = np.log(arg)
    mean = states.mean(axis=0)
    std = states.std(axis=0)
    if np.any(std <= 1e-12 * np.maximum(1.0, np.abs(mean))):
        raise ZeroVariance(f"state channel with zero variance: std={std}")
    if control_bounds is None:
        controls = np.concatenate([tr.control.values for tr in train])
        lo, hi = controls.min(axis=0), controls.max(axis=0)
    else:
        lo, hi = np.asarray(control_bounds[0], float), np.asarray(control_bounds[1], float)
    return NormStats(
        state_mean=tuple(float(v) for v in mean),
        state_std=tuple(float(v) for v in std),
        control_min=tuple(float(v) for v in lo),
        control_max=tuple(float(v) for v in hi),
        state_transform=state_transform,
        log_shift=tuple(float(v) for v in log_shift),
    )


def apply_norm(path: TimedPath, stats: NormStats, role: str) -> TimedPath:
    if role == "state":
        return path.with_values(stats.encode_state(path.values))
    if role == "control":
        return path.with_values(stats.encode_control(path.values))
    raise ValueError(f"role must be 'state' or 'control', got {role!r}")


def invert_norm(path: TimedPath, stats: NormStats, role: str) -> TimedPath:
    if role == "state":
        return path.with_values(stats.decode_state(path.values))
    if role == "control":
        return path.with_values(stats.decode_control(path.values))
    raise ValueError(f"role must be 'state' or 'control', got {role!r}")


def normalize_dataset(ds: Dataset, stats: NormStats) -> Dataset:
    """Normalize states and controls; ``x0`` stays in raw units (it conditions the simulator)."""
    if ds.normalized:
        raise ValueError("dataset is already normalized")
    trajs = tuple(
        replace(tr, state=apply_norm(tr.state, stats, "state"), control=apply_norm(tr.control, stats, "control"))
        for tr in ds
    )
    return replace(ds, trajectories=trajs, norm=stats, normalized=True)


# Serialization -------------------------------------------------------------


def _atomic_write_text(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp_")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for i, tr in enumerate(ds):
        name = f"traj_{i:05d}.csv"
        rows = ["t," + ",".join([f"x{c}" for c in range(tr.state.dim)] + [f"u{c}" for c in range(tr.control.dim)])]
        for k in range(tr.state.n_points):
            vals = [tr.state.times[k], *tr.state.values[k], *tr.control.values[k]]
            rows.append(",".join(repr(float(v)) for v in vals))
        _atomic_write_text(directory / name, "\n".join(rows) + "\n")
        records.append({
            "file": name,
            "x0": [float(v) for v in tr.x0],
            "plan": tr.plan,
            "d_x": tr.state.dim,
            "d_u": tr.control.dim,
        })
    first = ds[0] if len(ds) else None
    manifest = {
        "format": DATASET_FORMAT,
        "interval": [float(ds.interval[0]), float(ds.interval[1])],
        "normalized": ds.normalized,
        "norm": ds.norm.to_dict() if ds.norm is not None else None,
        "state_labels": list(first.state.channel_labels) if first and first.state.channel_labels else None,
        "control_labels": list(first.control.channel_labels) if first and first.control.channel_labels else None,
        "meta": ds.meta,
        "trajectories": records,
    }
    _atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise MissingArtifact(f"no dataset manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {manifest.get('format')!r}")
    s_labels = manifest.get("state_labels")
    c_labels = manifest.get("control_labels")
    trajs = []
    for rec in manifest["trajectories"]:
        with open(directory / rec["file"], newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            data = np.array([[float(v) for v in row] for row in reader], dtype=np.float64)
        dx = rec["d_x"]
        t = data[:, 0]
        state = make_path(t, data[:, 1:1 + dx], s_labels)
        control = make_path(t, data[:, 1 + dx:], c_labels)
        trajs.append(Trajectory(state, control, _frozen(rec["x0"]), rec.get("plan")))
    norm = NormStats.from_dict(manifest["norm"]) if manifest.get("norm") else None
    return Dataset(
        tuple(trajs),
        tuple(manifest["interval"]),
        norm=norm,
        normalized=manifest["normalized"],
        meta=manifest.get("meta", {}),
    )

"""Signature transform, signature kernel and kernel two-sample statistics.

The kernel is the terminal value of the Goursat problem

    d^2 u / ds dt = <d phi(x_s), d phi(y_t)> u,   u(0, .) = u(., 0) = 1,

where ``phi`` is the feature map of a static kernel. The static-kernel double increments
of the sample grid are refined ``2**dyadic_order`` times per axis and the PDE is solved
with the explicit second-order stencil

    u[i+1,j+1] = (u[i+1,j] + u[i,j+1]) (1 + d/2 + d^2/12) - u[i,j] (1 - d^2/12).

The solver runs in numba; reverse mode uses the exact adjoint of the same stencil.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
import torch

from .errors import EmptyPath, EmptySample, SampleTooSmall
from .paths import TimedPath

DTYPE = torch.float64
CHUNK = 512


@dataclass(frozen=True)
class StaticKernelSpec:
    """``rbf``: ``exp(-|x - y|^2 / (2 bandwidth^2))``; ``linear``: ``<x, y>``."""

    kind: str = "rbf"
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.kind not in ("rbf", "linear"):
            raise ValueError(f"unknown static kernel {self.kind!r}")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")


@dataclass(frozen=True)
class SigKernelConfig:
    static: StaticKernelSpec = field(default_factory=StaticKernelSpec)
    dyadic_order: int = 1
    time_augment: bool = True

    def __post_init__(self):
        if self.dyadic_order < 0:
            raise ValueError("dyadic_order must be >= 0")


LINEAR = StaticKernelSpec("linear")


# Truncated signature (oracle) ------------------------------------------------


@dataclass(frozen=True)
class TruncatedSignature:
    level: int
    tensors: tuple[np.ndarray, ...]

    def inner(self, other: "TruncatedSignature") -> float:
        m = min(self.level, other.level)
        return float(sum(np.sum(a * b) for a, b in zip(self.tensors[: m + 1], other.tensors[: m + 1])))


def _tensor_exp(a: np.ndarray, M: int) -> list[np.ndarray]:
    out = [np.ones(())]
    for k in range(1, M + 1):
        out.append(np.multiply.outer(out[-1], a) / k)
    return out


def _chen(s: list[np.ndarray], e: list[np.ndarray], M: int) -> list[np.ndarray]:
    return [sum(np.multiply.outer(s[i], e[k - i]) for i in range(k + 1)) for k in range(M + 1)]


def truncated_signature(path: TimedPath | np.ndarray, M: int) -> TruncatedSignature:
    """Iterated integrals of the piecewise-linear interpolant up to level ``M`` (Chen's relation)."""
    if M < 0:
        raise ValueError("M must be >= 0")
    values = path.values if isinstance(path, TimedPath) else np.asarray(path, dtype=np.float64)
    d = values.shape[1]
    sig = [np.ones(())] + [np.zeros((d,) * k) for k in range(1, M + 1)]
    for inc in np.diff(values, axis=0):
        sig = _chen(sig, _tensor_exp(inc, M), M)
    return TruncatedSignature(M, tuple(sig))


# Goursat solver --------------------------------------------------------------


@numba.njit(cache=True)
def _increments(X, Y, kind, bw2):
    n_batch, lx, d = X.shape
    ly = Y.shape[1]
    G = np.empty((lx, ly))
    inc = np.empty((n_batch, lx - 1, ly - 1))
    for n in range(n_batch):
        for p in range(lx):
            for q in range(ly):
                acc = 0.0
                if kind == 0:
                    for k in range(d):
                        acc += X[n, p, k] * Y[n, q, k]
                    G[p, q] = acc
                else:
                    for k in range(d):
                        r = X[n, p, k] - Y[n, q, k]
                        acc += r * r
                    G[p, q] = np.exp(-acc / (2.0 * bw2))
        for p in range(lx - 1):
            for q in range(ly - 1):
                inc[n, p, q] = G[p + 1, q + 1] - G[p + 1, q] - G[p, q + 1] + G[p, q]
    return inc


@numba.njit(cache=True)
def _increments_adjoint(X, Y, ginc, kind, bw2):
    n_batch, lx, d = X.shape
    ly = Y.shape[1]
    gX = np.zeros(X.shape)
    gY = np.zeros(Y.shape)
    for n in range(n_batch):
        for p in range(lx):
            for q in range(ly):
                w = 0.0
                if p > 0 and q > 0:
                    w += ginc[n, p - 1, q - 1]
                if p > 0 and q < ly - 1:
                    w -= ginc[n, p - 1, q]
                if p < lx - 1 and q > 0:
                    w -= ginc[n, p, q - 1]
                if p < lx - 1 and q < ly - 1:
                    w += ginc[n, p, q]
                if kind == 0:
                    for k in range(d):
                        gX[n, p, k] += w * Y[n, q, k]
                        gY[n, q, k] += w * X[n, p, k]
                else:
                    acc = 0.0
                    for k in range(d):
                        r = X[n, p, k] - Y[n, q, k]
                        acc += r * r
                    c = w * np.exp(-acc / (2.0 * bw2)) / bw2
                    for k in range(d):
                        r = X[n, p, k] - Y[n, q, k]
                        gX[n, p, k] -= c * r
                        gY[n, q, k] += c * r
    return gX, gY


@numba.njit(cache=True)
def _goursat_value(inc, order):
    n_batch, a0, b0 = inc.shape
    A, B = a0 << order, b0 << order
    scale = 1.0 / float(1 << (2 * order))
    out = np.empty(n_batch)
    prev = np.empty(B + 1)
    cur = np.empty(B + 1)
    for n in range(n_batch):
        for j in range(B + 1):
            prev[j] = 1.0
        for i in range(A):
            cur[0] = 1.0
            for j in range(B):
                d = inc[n, i >> order, j >> order] * scale
                d2 = d * d / 12.0
                cur[j + 1] = (cur[j] + prev[j + 1]) * (1.0 + 0.5 * d + d2) - prev[j] * (1.0 - d2)
            for j in range(B + 1):
                prev[j] = cur[j]
        out[n] = prev[B]
    return out


@numba.njit(cache=True)
def _goursat_full(inc, order):
    n_batch, a0, b0 = inc.shape
    A, B = a0 << order, b0 << order
    scale = 1.0 / float(1 << (2 * order))
    u = np.empty((n_batch, A + 1, B + 1))
    for n in range(n_batch):
        for i in range(A + 1):
            u[n, i, 0] = 1.0
        for j in range(B + 1):
            u[n, 0, j] = 1.0
        for i in range(A):
            for j in range(B):
                d = inc[n, i >> order, j >> order] * scale
                d2 = d * d / 12.0
                u[n, i + 1, j + 1] = (u[n, i + 1, j] + u[n, i, j + 1]) * (1.0 + 0.5 * d + d2) - u[n, i, j] * (1.0 - d2)
    return u


@numba.njit(cache=True)
def _goursat_adjoint(inc, u, order):
    """Gradient of the terminal value w.r.t. the coarse increments."""
    n_batch, a0, b0 = inc.shape
    A, B = a0 << order, b0 << order
    scale = 1.0 / float(1 << (2 * order))
    grad = np.zeros((n_batch, a0, b0))
    ub = np.zeros((A + 1, B + 1))
    for n in range(n_batch):
        for i in range(A + 1):
            for j in range(B + 1):
                ub[i, j] = 0.0
        ub[A, B] = 1.0
        for i in range(A - 1, -1, -1):
            for j in range(B - 1, -1, -1):
                w = ub[i + 1, j + 1]
                d = inc[n, i >> order, j >> order] * scale
                a = 1.0 + 0.5 * d + d * d / 12.0
                b = 1.0 - d * d / 12.0
                s = u[n, i + 1, j] + u[n, i, j + 1]
                grad[n, i >> order, j >> order] += scale * w * (s * (0.5 + d / 6.0) + u[n, i, j] * d / 6.0)
                ub[i + 1, j] += w * a
                ub[i, j + 1] += w * a
                ub[i, j] -= w * b
    return grad


def _kind_code(spec: StaticKernelSpec) -> int:
    return 0 if spec.kind == "linear" else 1


class _SigKernel(torch.autograd.Function):
    @staticmethod
    def forward(ctx, X, Y, kind, bw2, order):
        Xa = np.ascontiguousarray(X.detach().numpy())
        Ya = np.ascontiguousarray(Y.detach().numpy())
        inc = _increments(Xa, Ya, kind, bw2)
        if X.requires_grad or Y.requires_grad:
            u = _goursat_full(inc, order)
            ctx.saved = (Xa, Ya, inc, u, kind, bw2, order)
            return torch.from_numpy(u[:, -1, -1].copy())
        return torch.from_numpy(_goursat_value(inc, order))

    @staticmethod
    def backward(ctx, grad_out):
        Xa, Ya, inc, u, kind, bw2, order = ctx.saved
        ginc = _goursat_adjoint(inc, u, order) * grad_out.numpy()[:, None, None]
        gX, gY = _increments_adjoint(Xa, Ya, ginc, kind, bw2)
        return torch.from_numpy(gX), torch.from_numpy(gY), None, None, None


def static_gram(X: torch.Tensor, Y: torch.Tensor, spec: StaticKernelSpec) -> torch.Tensor:
    """Pairwise static kernel along two batches of paths: ``(N, Lx, d), (N, Ly, d) -> (N, Lx, Ly)``."""
    if spec.kind == "linear":
        return torch.einsum("npk,nqk->npq", X, Y)
    diff = X[:, :, None, :] - Y[:, None, :, :]
    return torch.exp(-(diff * diff).sum(-1) / (2.0 * spec.bandwidth ** 2))


def sig_kernel_batch(X: torch.Tensor, Y: torch.Tensor, cfg: SigKernelConfig, transpose=None) -> torch.Tensor:
    """Row-wise kernel ``k(X[n], Y[n])`` for preprocessed tensors. ``transpose`` is an optional
    boolean mask selecting rows solved with the roles of X and Y swapped."""
    if X.shape[1] < 2 or Y.shape[1] < 2:
        return torch.ones(X.shape[0], dtype=DTYPE)
    if transpose is not None and np.any(transpose):
        flip = torch.as_tensor(np.asarray(transpose))[:, None, None]
        X, Y = torch.where(flip, Y, X), torch.where(flip, X, Y)
    kind, bw2 = _kind_code(cfg.static), float(cfg.static.bandwidth) ** 2
    out = [_SigKernel.apply(X[lo:lo + CHUNK], Y[lo:lo + CHUNK], kind, bw2, cfg.dyadic_order)
           for lo in range(0, X.shape[0], CHUNK)]
    return torch.cat(out) if out else torch.zeros(0, dtype=DTYPE)


# Preprocessing ---------------------------------------------------------------


def augment_tensor(values: torch.Tensor, times, t_s: float, t_f: float) -> torch.Tensor:
    """Append normalized time to ``(N, L, d)`` values observed at ``times`` (``(L,)`` or ``(N, L)``)."""
    tau = (torch.tensor(np.asarray(times, dtype=np.float64)) - t_s) / (t_f - t_s)
    if tau.ndim == 1:
        tau = tau.expand(values.shape[0], -1)
    return torch.cat([values, tau[..., None]], dim=-1)


def pad_stack(arrays: Sequence[torch.Tensor], length: int | None = None) -> torch.Tensor:
    """Stack ``(L_i, d)`` tensors by repeating each last row; zero increments leave the kernel unchanged."""
    L = max(a.shape[0] for a in arrays) if length is None else length
    rows = []
    for a in arrays:
        if a.shape[0] < L:
            a = torch.cat([a, a[-1:].expand(L - a.shape[0], -1)], dim=0)
        rows.append(a)
    return torch.stack(rows)


def paths_to_tensor(paths: Sequence[TimedPath], cfg: SigKernelConfig, interval=None, length=None) -> torch.Tensor:
    if len(paths) == 0:
        raise EmptySample("no paths given")
    arrays = []
    for p in paths:
        if p.n_points < 1:
            raise EmptyPath("empty path")
        v = torch.tensor(p.values, dtype=DTYPE)
        if cfg.time_augment:
            t_s, t_f = interval if interval is not None else p.span
            tau = (torch.tensor(p.times, dtype=DTYPE) - t_s) / (t_f - t_s)
            v = torch.cat([v, tau[:, None]], dim=1)
        arrays.append(v)
    return pad_stack(arrays, length)


# Gram matrices ---------------------------------------------------------------


def _content_ranks(X: torch.Tensor, Y: torch.Tensor):
    keys_x = [x.detach().numpy().tobytes() for x in X]
    keys_y = [y.detach().numpy().tobytes() for y in Y]
    order = {k: r for r, k in enumerate(sorted(set(keys_x) | set(keys_y)))}
    return np.array([order[k] for k in keys_x]), np.array([order[k] for k in keys_y])


def gram_tensor(XA: torch.Tensor, XB: torch.Tensor, cfg: SigKernelConfig, symmetric: bool = False) -> torch.Tensor:
    """``G[i, j] = k(XA[i], XB[j])``. Each pair is solved in a content-determined orientation, so
    ``k(x, y)`` and ``k(y, x)`` are bit-identical wherever they appear."""
    na, nb = XA.shape[0], XB.shape[0]
    L = max(XA.shape[1], XB.shape[1])
    if XA.shape[1] != L:
        XA = pad_stack(list(XA), L)
    if XB.shape[1] != L:
        XB = pad_stack(list(XB), L)
    ra, rb = _content_ranks(XA, XB)
    if symmetric:
        ii, jj = np.triu_indices(na)
    else:
        ii, jj = np.divmod(np.arange(na * nb), nb)
    flip = ra[ii] > rb[jj]
    vals = sig_kernel_batch(XA[ii], XB[jj], cfg, transpose=flip)
    if symmetric:
        G = torch.zeros(na, na, dtype=DTYPE)
        idx = torch.as_tensor(ii * na + jj)
        idx_t = torch.as_tensor(jj * na + ii)
        G = G.reshape(-1).index_put((idx,), vals).index_put((idx_t,), vals).reshape(na, na)
        return G
    return vals.reshape(na, nb)


def gram(paths_a: Sequence[TimedPath], paths_b: Sequence[TimedPath], cfg: SigKernelConfig, interval=None) -> np.ndarray:
    A = paths_to_tensor(paths_a, cfg, interval)
    B = paths_to_tensor(paths_b, cfg, interval)
    with torch.no_grad():
        return gram_tensor(A, B, cfg, symmetric=paths_a is paths_b).numpy()


def sig_kernel(x: TimedPath, y: TimedPath, cfg: SigKernelConfig, interval=None) -> float:
    return float(gram([x], [y], cfg, interval)[0, 0])


# Statistics --------------------------------------------------------------------


def _within_mean(K: torch.Tensor, unbiased: bool) -> torch.Tensor:
    if not unbiased:
        return K.mean()
    n = K.shape[0]
    return (K.sum() - torch.diagonal(K).sum()) / (n * (n - 1))


def mmd_squared_tensor(XP: torch.Tensor, XQ: torch.Tensor, cfg: SigKernelConfig, unbiased: bool = False) -> torch.Tensor:
    """MMD^2; the default plug-in V-statistic is exactly 0 on identical samples, ``unbiased`` drops diagonals."""
    if XP.shape[0] == 0 or XQ.shape[0] == 0:
        raise EmptySample("MMD needs two nonempty samples")
    if unbiased and min(XP.shape[0], XQ.shape[0]) < 2:
        raise SampleTooSmall("the unbiased estimator needs at least 2 paths per sample")
    Kpp = gram_tensor(XP, XP, cfg, symmetric=True)
    Kqq = gram_tensor(XQ, XQ, cfg, symmetric=True)
    Kpq = gram_tensor(XP, XQ, cfg)
    return _within_mean(Kpp, unbiased) + _within_mean(Kqq, unbiased) - 2.0 * Kpq.mean()


def mmd_squared(sample_p: Sequence[TimedPath], sample_q: Sequence[TimedPath], cfg: SigKernelConfig, interval=None,
                unbiased: bool = False) -> float:
    if len(sample_p) == 0 or len(sample_q) == 0:
        raise EmptySample("MMD needs two nonempty samples")
    L = max(p.n_points for p in list(sample_p) + list(sample_q))
    XP = paths_to_tensor(sample_p, cfg, interval, L)
    XQ = paths_to_tensor(sample_q, cfg, interval, L)
    with torch.no_grad():
        return float(mmd_squared_tensor(XP, XQ, cfg, unbiased))


def sig_score_tensor(XM: torch.Tensor, y: torch.Tensor, cfg: SigKernelConfig, include_diagonal: bool = False) -> torch.Tensor:
    """Signature kernel score of the empirical law of ``XM`` (``(m, L, d)``) at ``y`` (``(L, d)``)."""
    m = XM.shape[0]
    if m < 2:
        raise SampleTooSmall("the score needs at least 2 model samples")
    K = gram_tensor(XM, XM, cfg, symmetric=True)
    if include_diagonal:
        first = K.mean()
    else:
        first = (K.sum() - torch.diagonal(K).sum()) / (m * (m - 1))
    cross = gram_tensor(XM, y[None], cfg)[:, 0]
    return first - 2.0 * cross.mean()


def sig_score(model_sample: Sequence[TimedPath], y: TimedPath, cfg: SigKernelConfig, interval=None,
              include_diagonal: bool = False) -> float:
    if len(model_sample) < 2:
        raise SampleTooSmall("the score needs at least 2 model samples")
    L = max(p.n_points for p in list(model_sample) + [y])
    XM = paths_to_tensor(model_sample, cfg, interval, L)
    Y = paths_to_tensor([y], cfg, interval, L)[0]
    with torch.no_grad():
        return float(sig_score_tensor(XM, Y, cfg, include_diagonal))


def linear_series(inner: float, terms: int = 20) -> float:
    """``sum_k inner^k / (k!)^2``: the kernel of two straight lines with increment product ``inner``."""
    return sum(inner ** k / math.factorial(k) ** 2 for k in range(terms + 1))

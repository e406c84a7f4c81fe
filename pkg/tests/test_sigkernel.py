import numpy as np
import pytest
import torch

from sigctrl import sde
from sigctrl import sigkernel as SK
from sigctrl import simulators as S
from sigctrl.errors import EmptySample, SampleTooSmall
from sigctrl.paths import make_path

from oracles import LINE_KERNEL_INNER_1

LIN = lambda order=1: SK.SigKernelConfig(SK.LINEAR, order, False)
RBF = SK.SigKernelConfig()


def random_path(rng, n, d=2, tv=1.0):
    v = np.cumsum(rng.normal(size=(n, d)), 0)
    v = v / np.abs(np.diff(v, axis=0)).sum() * tv
    return make_path(np.arange(n, dtype=float), v)


class TestTruncatedSignature:
    def test_constant_path(self):
        s = SK.truncated_signature(make_path([0, 1, 2], [[1.0, 2.0]] * 3), 4)
        assert s.tensors[0] == 1.0
        assert all(np.all(t == 0) for t in s.tensors[1:])

    def test_straight_line(self):
        a = np.array([0.3, -1.2, 0.5])
        s = SK.truncated_signature(make_path([0, 1], [np.zeros(3), a]), 3)
        np.testing.assert_allclose(s.tensors[2], np.multiply.outer(a, a) / 2, rtol=1e-14)
        np.testing.assert_allclose(s.tensors[3], np.multiply.outer(np.multiply.outer(a, a), a) / 6, rtol=1e-14)

    def test_level_one_is_increment(self, rng):
        p = random_path(rng, 9, 3)
        np.testing.assert_allclose(SK.truncated_signature(p, 2).tensors[1], p.values[-1] - p.values[0], atol=1e-15)

    def test_shapes(self):
        s = SK.truncated_signature(np.zeros((3, 2)), 3)
        assert [t.shape for t in s.tensors] == [(), (2,), (2, 2), (2, 2, 2)]


class TestKernel:
    def test_constant_paths_one(self):
        x = make_path([0, 1, 2], [[1.0], [1.0], [1.0]])
        assert SK.sig_kernel(x, x, LIN()) == 1.0

    def test_self_kernel_lower_bound(self, rng):
        for _ in range(5):
            p = random_path(rng, 6)
            assert SK.sig_kernel(p, p, LIN(2)) >= 1.0

    @pytest.mark.parametrize("order", [3, 4])
    def test_lines(self, order):
        x = make_path([0, 1], [[0.0, 0.0], [1.0, 0.0]])
        y = make_path([0, 1], [[0.0, 0.0], [1.0, 5.0]])
        assert abs(SK.sig_kernel(x, y, LIN(order)) - LINE_KERNEL_INNER_1) < 1e-3
        assert abs(SK.linear_series(1.0) - LINE_KERNEL_INNER_1) < 1e-15

    def test_symmetry_bit_exact(self, rng):
        for cfg in (LIN(2), RBF):
            for _ in range(10):
                p, q = random_path(rng, 5), random_path(rng, 8)
                assert SK.sig_kernel(p, q, cfg) == SK.sig_kernel(q, p, cfg)

    def test_gram_single_and_permutation(self, rng):
        A = [random_path(rng, 6) for _ in range(5)]
        G = SK.gram(A, A, RBF)
        assert G.shape == (5, 5)
        assert SK.gram(A[:1], A[:1], RBF)[0, 0] == SK.sig_kernel(A[0], A[0], RBF)
        perm = rng.permutation(5)
        np.testing.assert_array_equal(SK.gram([A[i] for i in perm], A, RBF), G[perm])

    def test_gram_psd_on_cancer_paths(self):
        cfg = S.CANCER_TASK
        rng = np.random.default_rng(0)
        x0s = np.array([S.sample_initial(cfg, rng) for _ in range(20)])
        plans = [S.sample_treatment(cfg, rng) for _ in range(20)]
        noise = sde.brownian_increments(cfg.grid, 2, rng, 20)
        states = S.simulate(cfg, x0s, plans, noise)[:, ::4]
        z = np.column_stack([np.log(states[..., 0].ravel()), np.log1p(states[..., 1].ravel())])
        z = ((z - z.mean(0)) / z.std(0)).reshape(20, -1, 2)
        paths = [make_path(cfg.obs_times, zi) for zi in z]
        G = SK.gram(paths, paths, RBF, interval=(0.0, 60.0))
        eig = np.linalg.eigvalsh(G)
        assert eig.min() >= -1e-6 * np.trace(G)
        np.testing.assert_array_equal(G, G.T)

    def test_dyadic_refinement_cauchy(self):
        t = np.linspace(0, 1, 6)
        x = make_path(t, np.column_stack([np.sin(2 * t), np.cos(3 * t)]))
        y = make_path(t, np.column_stack([t ** 2, np.sin(t)]))
        vals = [SK.sig_kernel(x, y, SK.SigKernelConfig(dyadic_order=o)) for o in range(5)]
        gaps = np.abs(np.diff(vals))
        assert np.all(np.diff(gaps) < 0)

    def test_padding_leaves_kernel_unchanged(self, rng):
        p, q = random_path(rng, 5), random_path(rng, 7)
        X = SK.paths_to_tensor([p], LIN(1))
        Xpad = SK.pad_stack([X[0]], 9)
        Y = SK.paths_to_tensor([q], LIN(1))
        a = SK.gram_tensor(X, Y, LIN(1))
        b = SK.gram_tensor(Xpad, Y, LIN(1))
        np.testing.assert_allclose(a.numpy(), b.numpy(), rtol=1e-12)

    def test_gradient_matches_gradcheck(self):
        torch.manual_seed(0)
        X = torch.randn(2, 5, 2, dtype=torch.float64, requires_grad=True)
        Y = torch.randn(2, 4, 2, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda X, Y: SK.sig_kernel_batch(X, Y, RBF), (X, Y), eps=1e-6, atol=1e-7)


def _ou_paths(n, shift, seed):
    m = sde.SdeModel(lambda x, u: -x + shift, lambda x, u: torch.ones_like(x), 1, 1, 0, diagonal=True)
    g = sde.SolverGrid(0, 1, 10)
    return sde.rollout_batch(m, [0.5], None, g, n, np.random.default_rng(seed))


def _perm_threshold(P, Q, cfg, n_perm=200, seed=0):
    pooled = SK.paths_to_tensor(list(P) + list(Q), cfg)
    with torch.no_grad():
        K = SK.gram_tensor(pooled, pooled, cfg, symmetric=True).numpy()
    n = len(P)

    def stat(idx):
        a, b = idx[:n], idx[n:]
        return K[np.ix_(a, a)].mean() + K[np.ix_(b, b)].mean() - 2 * K[np.ix_(a, b)].mean()

    rng = np.random.default_rng(seed)
    null = [stat(rng.permutation(2 * n)) for _ in range(n_perm)]
    return stat(np.arange(2 * n)), np.quantile(null, 0.95)


class TestMmd:
    def test_identical_zero(self, rng):
        P = [random_path(rng, 6) for _ in range(8)]
        assert SK.mmd_squared(P, P, RBF) == 0.0

    def test_unbiased_formula(self, rng):
        A = [random_path(rng, 6) for _ in range(4)]
        B = [random_path(rng, 6) for _ in range(3)]
        Kaa, Kbb, Kab = SK.gram(A, A, RBF), SK.gram(B, B, RBF), SK.gram(A, B, RBF)
        want = ((Kaa.sum() - np.trace(Kaa)) / 12 + (Kbb.sum() - np.trace(Kbb)) / 6 - 2 * Kab.mean())
        np.testing.assert_allclose(SK.mmd_squared(A, B, RBF, unbiased=True), want, rtol=1e-12)
        assert SK.mmd_squared(A, A, RBF, unbiased=True) < 0  # diagonal-free estimate of zero dips below it
        with pytest.raises(SampleTooSmall):
            SK.mmd_squared(A[:1], B, RBF, unbiased=True)

    def test_permutation_invariant(self, rng):
        P = [random_path(rng, 6) for _ in range(6)]
        Q = [random_path(rng, 6) for _ in range(4)]
        a = SK.mmd_squared(P, Q, RBF)
        b = SK.mmd_squared(P[::-1], [Q[i] for i in (2, 0, 3, 1)], RBF)
        assert abs(a - b) < 1e-12

    def test_empty(self, rng):
        with pytest.raises(EmptySample):
            SK.mmd_squared([], [random_path(rng, 3)], RBF)

    def test_same_law_below_threshold(self):
        stat, thr = _perm_threshold(_ou_paths(200, 0.0, 1), _ou_paths(200, 0.0, 2), RBF)
        assert stat < thr

    def test_shifted_law_above_threshold(self):
        stat, thr = _perm_threshold(_ou_paths(200, 0.0, 1), _ou_paths(200, 0.5, 2), RBF)
        assert stat > thr


class TestScore:
    def test_copies(self, rng):
        y = random_path(rng, 6)
        k = SK.sig_kernel(y, y, RBF)
        np.testing.assert_allclose(SK.sig_score([y] * 4, y, RBF), -k, rtol=1e-12)

    def test_two_samples(self, rng):
        a, b, y = (random_path(rng, 6) for _ in range(3))
        k = lambda p, q: SK.sig_kernel(p, q, RBF)
        np.testing.assert_allclose(SK.sig_score([a, b], y, RBF), k(a, b) - (k(a, y) + k(b, y)), rtol=1e-12)

    def test_diagonal_flag(self, rng):
        a, b, y = (random_path(rng, 6) for _ in range(3))
        k = lambda p, q: SK.sig_kernel(p, q, RBF)
        want = (k(a, a) + k(b, b) + 2 * k(a, b)) / 4 - (k(a, y) + k(b, y))
        np.testing.assert_allclose(SK.sig_score([a, b], y, RBF, include_diagonal=True), want, rtol=1e-12)

    def test_too_small(self, rng):
        with pytest.raises(SampleTooSmall):
            SK.sig_score([random_path(rng, 3)], random_path(rng, 3), RBF)

    def test_propriety_direction(self):
        data = _ou_paths(500, 0.0, 11)
        P = SK.paths_to_tensor(_ou_paths(40, 0.0, 12), RBF)
        Q = SK.paths_to_tensor(_ou_paths(40, 0.5, 13), RBF)
        Y = SK.paths_to_tensor(data, RBF)

        def mean_score(M):
            with torch.no_grad():
                K = SK.gram_tensor(M, M, RBF, symmetric=True)
                first = (K.sum() - K.diagonal().sum()) / (M.shape[0] * (M.shape[0] - 1))
                cross = SK.gram_tensor(M, Y, RBF).mean(0)
            s = first - 2 * cross
            return s.mean().item(), s.std().item() / np.sqrt(len(data))

        sp, ep = mean_score(P)
        sq, eq = mean_score(Q)
        assert sp - sq <= 3 * np.hypot(ep, eq)
        assert sp < sq

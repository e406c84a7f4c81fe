import csv
import io

import numpy as np
import pytest
import torch

from sigctrl import bench
from sigctrl import model as MD
from sigctrl import plans as P
from sigctrl import sde
from sigctrl import sigkernel as SK
from sigctrl import simulators as S
from sigctrl.errors import MissingArtifact, NonFiniteGradient, SampleTooSmall
from sigctrl.paths import load_dataset

from oracles import CANCER_NET_PARAMS

KCFG = SK.SigKernelConfig()


def small_spec():
    return MD.NetSdeSpec(2, 1, drift_layers=1, drift_hidden=8, diff_layers=1, diff_hidden=8)


class TestArchitecture:
    def test_cancer_param_count(self):
        spec = MD.NetSdeSpec(2, 2)
        net = MD.NetSde(spec)
        assert spec.param_count() == CANCER_NET_PARAMS
        assert sum(p.numel() for p in net.parameters()) == CANCER_NET_PARAMS

    @pytest.mark.parametrize("d_x,d_u,layers,hidden", [(4, 1, 3, 64), (2, 2, 2, 16), (3, 1, 1, 5)])
    def test_count_formula(self, d_x, d_u, layers, hidden):
        spec = MD.NetSdeSpec(d_x, d_u, layers, hidden, diffusion_uses_control=True)
        assert sum(p.numel() for p in MD.NetSde(spec).parameters()) == spec.param_count()

    def test_independent_networks_per_state(self):
        net = MD.NetSde(MD.NetSdeSpec(2, 2))
        assert all(w.shape[0] == 2 for w in net.drift_net.weights)
        assert all(w.shape[0] == 2 for w in net.diff_net.weights)
        x = torch.zeros(3, 2, dtype=torch.float64)
        u = torch.zeros(3, 2, dtype=torch.float64)
        before = net.drift(x, u).detach().clone()
        with torch.no_grad():
            net.drift_net.biases[-1][1] += 1.0
        after = net.drift(x, u).detach()
        assert torch.equal(before[:, 0], after[:, 0]) and not torch.equal(before[:, 1], after[:, 1])

    def test_diffusion_bounded(self):
        net = MD.NetSde(MD.NetSdeSpec(2, 2, s_max=0.7))
        s = net.diffusion(torch.randn(100, 2, dtype=torch.float64) * 10, torch.zeros(100, 2, dtype=torch.float64))
        assert torch.all(s > 0) and torch.all(s < 0.7)

    def test_zero_output_layers_constant_path(self):
        net = MD.NetSde(small_spec())
        net.drift_net.zero_final()
        with torch.no_grad():
            net.diff_net.weights[-1].zero_()
            net.diff_net.biases[-1].fill_(-40.0)
        g = sde.SolverGrid(0, 1, 10)
        noise = sde.brownian_increments(g, 2, np.random.default_rng(0), 4)
        with torch.no_grad():
            X = MD.forward_rollout(net, [0.3, -0.1], np.ones((10, 1)), g, noise)
        assert torch.max(torch.abs(X - X[:, :1])) < 1e-12

    def test_rollout_deterministic(self):
        net = MD.NetSde(small_spec(), seed=3)
        g = sde.SolverGrid(0, 1, 10)
        noise = sde.brownian_increments(g, 2, np.random.default_rng(0), 4)
        a = MD.forward_rollout(net, [0.3, -0.1], np.ones((10, 1)), g, noise)
        b = MD.forward_rollout(net, [0.3, -0.1], np.ones((10, 1)), g, noise)
        assert torch.equal(a, b)

    def test_seeded_init(self):
        assert torch.equal(MD.NetSde(small_spec(), 5).flat(), MD.NetSde(small_spec(), 5).flat())
        assert not torch.equal(MD.NetSde(small_spec(), 5).flat(), MD.NetSde(small_spec(), 6).flat())

    def test_init_network_only_when_requested(self):
        with pytest.raises(ValueError):
            MD.NetSde(small_spec()).sample_x0(torch.zeros(1, 3))
        net = MD.NetSde(MD.NetSdeSpec(2, 1, 1, 8, d_v=3), 0)
        assert net.sample_x0(torch.zeros(5, 3, dtype=torch.float64)).shape == (5, 2)
        assert sum(p.numel() for p in net.parameters()) == net.spec.param_count()


class TestGrad:
    def test_constant_loss(self):
        net = MD.NetSde(small_spec())
        gs = MD.grad(lambda: torch.tensor(3.0, dtype=torch.float64), net.parameters())
        assert all(torch.all(g == 0) for g in gs)

    def test_quadratic(self):
        net = MD.NetSde(small_spec())
        params = list(net.parameters())
        gs = MD.grad(lambda: sum((p ** 2).sum() for p in params) / 2, params)
        assert all(torch.equal(g, p.detach()) for g, p in zip(gs, params))

    def test_non_finite(self):
        p = torch.nn.Parameter(torch.zeros(2, dtype=torch.float64))
        with pytest.raises(NonFiniteGradient):
            MD.grad(lambda: torch.sqrt(p).sum(), [p])


@pytest.fixture(scope="module")
def small_cancer():
    return S.generate_dataset(S.CANCER_TASK, 0, 24, 8)


class _Wrapped:
    """Lets a fixed SdeModel stand in for a network inside the score loss."""

    def __init__(self, model):
        self._m = model

    def sde(self):
        return self._m


class TestLoss:
    def test_finite_on_cancer_batch(self, small_cancer):
        tr, _ = small_cancer
        g = S.CANCER_TASK.grid
        data = MD.prepare(tr, g, KCFG)
        net = MD.NetSde(MD.NetSdeSpec(2, 2), 0)
        noise = sde.brownian_increments(g, 2, np.random.default_rng(0), 4 * 3)
        loss = MD.loss_conditional_sig_score(net, data, [0, 5, 9, 11], 3, g, KCFG, tr.interval, noise)
        assert torch.isfinite(loss)

    def test_m_two_formula(self, small_cancer):
        tr, _ = small_cancer
        g = S.CANCER_TASK.grid
        data = MD.prepare(tr, g, KCFG)
        net = MD.NetSde(MD.NetSdeSpec(2, 2), 1)
        noise = sde.brownian_increments(g, 2, np.random.default_rng(1), 2)
        with torch.no_grad():
            loss = float(MD.loss_conditional_sig_score(net, data, [4], 2, g, KCFG, tr.interval, noise))
            X = MD.forward_rollout(net, data.x0[4], data.controls[4], g, noise)[:, data.indices[4]]
        X = SK.augment_tensor(X, data.times[4], *tr.interval)
        y = data.observed[4]
        k = lambda a, b: float(SK.gram_tensor(a[None], b[None], KCFG)[0, 0])
        np.testing.assert_allclose(loss, k(X[0], X[1]) - (k(X[0], y) + k(X[1], y)), rtol=1e-10)

    def test_m_guard(self, small_cancer):
        tr, _ = small_cancer
        g = S.CANCER_TASK.grid
        with pytest.raises(SampleTooSmall):
            MD.loss_conditional_sig_score(MD.NetSde(MD.NetSdeSpec(2, 2)), MD.prepare(tr, g, KCFG), [0], 1, g, KCFG,
                                          tr.interval, np.zeros((1, g.n_steps, 2)))

    def test_true_model_scores_better(self):
        # OU with input: data from the true law; the score of the truth beats a 50% drift error
        g = sde.SolverGrid(0, 1, 20)
        true = sde.SdeModel(lambda x, u: -x + u, lambda x, u: 0.5 * torch.ones_like(x), 1, 1, 1, diagonal=True)
        wrong = sde.SdeModel(lambda x, u: -1.5 * x + u, lambda x, u: 0.5 * torch.ones_like(x), 1, 1, 1, diagonal=True)
        gaps = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            n = 16
            x0 = torch.as_tensor(rng.uniform(0.5, 1.5, size=(n, 1)))
            U = torch.as_tensor(np.repeat(rng.uniform(0, 1, size=(n, 1, 1)), g.n_steps, axis=1))
            with torch.no_grad():
                Y = sde.integrate(true, x0, U, g, sde.brownian_increments(g, 1, rng, n))
            obs = [SK.augment_tensor(Y[i:i + 1], g.nodes(), 0, 1)[0] for i in range(n)]
            data = MD.TrainBatchData(x0, U, obs, [np.arange(21)] * n, [g.nodes()] * n)
            noise = sde.brownian_increments(g, 1, rng, n * 8)
            with torch.no_grad():
                a = MD.loss_conditional_sig_score(_Wrapped(true), data, range(n), 8, g, KCFG, (0, 1), noise)
                b = MD.loss_conditional_sig_score(_Wrapped(wrong), data, range(n), 8, g, KCFG, (0, 1), noise)
            gaps.append(float(a - b))
        assert np.median(gaps) < 0


class TestTraining:
    def test_seed_determinism_and_trace(self, small_cancer):
        tr, va = small_cancer
        g = S.CANCER_TASK.grid
        spec = MD.NetSdeSpec(2, 2, 1, 8)
        cfg = MD.TrainConfig(lr=1e-3, steps=6, batch=4, m=2, seed=11, val_every=3, val_size=4)
        a = MD.train(spec, tr, va, g, cfg)
        b = MD.train(spec, tr, va, g, cfg)
        assert torch.equal(a.model.flat(), b.model.flat())
        assert [s for s, _ in a.trace] == list(range(1, 7))
        assert all(np.isfinite(v) for _, v in a.trace)
        assert [s for s, _ in a.val_trace] == [3, 6] and a.best_step in (3, 6)
        rows = list(csv.reader(io.StringIO(a.trace_csv())))
        assert rows[0] == ["step", "loss", "val_score"] and len(rows) == 7

    def test_checkpoint_round_trip(self, tmp_path, small_cancer):
        tr, _ = small_cancer
        net = MD.NetSde(MD.NetSdeSpec(2, 2), 4)
        MD.save_checkpoint(net, tr.norm, tmp_path / "m" / "ck.json", {"k": 1})
        back, norm, extra = MD.load_checkpoint(tmp_path / "m" / "ck.json")
        assert torch.equal(back.flat(), net.flat()) and norm == tr.norm and extra == {"k": 1}
        with pytest.raises(MissingArtifact):
            MD.load_checkpoint(tmp_path / "none.json")

    def test_config_guard(self):
        with pytest.raises(ValueError):
            MD.TrainConfig(m=1)


# desk-scale trained model -------------------------------------------------------


@pytest.mark.slow
class TestDeskModel:
    def test_loss_decreases(self, desk_cancer):
        _, out = desk_cancer
        rows = list(csv.DictReader(open(bench.checkpoint_path(out).parent / "trace.csv")))
        loss = np.array([float(r["loss"]) for r in rows])
        assert np.all(np.isfinite(loss))
        assert np.median(loss[-100:]) < np.median(loss[:100])

    def test_one_step_mse_beats_untrained(self, desk_cancer):
        cfg, out = desk_cancer
        val = load_dataset(bench.data_dir(out) / "val")
        sub = type(val)(val.trajectories[:16], val.interval, val.norm, True)
        model, _, _ = MD.load_checkpoint(bench.checkpoint_path(out))
        g = S.CANCER_TASK.grid
        trained = MD.one_step_mse(model, sub, g, seed=0)
        untrained = [MD.one_step_mse(MD.NetSde(model.spec, s), sub, g, seed=0) for s in range(10)]
        assert trained < np.median(untrained)

    def test_conditioning_respected(self, desk_cancer):
        cfg, out = desk_cancer
        dyn = bench._load_model(cfg, out, bench.task_of(cfg))
        x0 = np.array([float(S.sphere_volume(3.5)), 0.0])
        g = dyn.grid
        obs = S.CANCER_TASK.obs_times
        norm = dyn.norm

        def sample(plan, seed, n=60):
            u = torch.as_tensor(P.step_controls(plan, g))
            with torch.no_grad():
                X = dyn.simulate(x0, u, dyn.noise(np.random.default_rng(seed), n))
            return bench._paths_tensor(X, g.nodes(), obs, norm, KCFG, (0.0, 60.0))

        def rejects(A, B, n_perm=200):
            pooled = torch.cat([A, B])
            with torch.no_grad():
                K = SK.gram_tensor(pooled, pooled, KCFG, symmetric=True).numpy()
            n = len(A)
            stat = lambda i: K[np.ix_(i[:n], i[:n])].mean() + K[np.ix_(i[n:], i[n:])].mean() - 2 * K[np.ix_(i[:n], i[n:])].mean()
            rng = np.random.default_rng(0)
            null = [stat(rng.permutation(2 * n)) for _ in range(n_perm)]
            return stat(np.arange(2 * n)) > np.quantile(null, 0.95)

        seq = sample(P.sequential_protocol(), 1)
        assert rejects(seq, sample(P.concurrent_protocol(), 2))
        assert not rejects(seq, sample(P.sequential_protocol(), 3))

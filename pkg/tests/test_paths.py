import json

import numpy as np
import pytest

from sigctrl import paths as PC
from sigctrl.errors import (DegenerateBounds, LengthMismatch, MissingArtifact, NonFiniteValue,
                            NonMonotoneTimes, NonPositiveForLog, OutOfRange, ZeroVariance)

from oracles import MASKED_DAILY_POINTS


def _ds(states, controls=None, times=None):
    times = np.arange(len(states[0])) if times is None else times
    trajs = []
    for i, s in enumerate(states):
        u = np.zeros(len(s)) if controls is None else controls[i]
        trajs.append(PC.Trajectory(PC.make_path(times, s), PC.make_path(times, u), np.atleast_1d(s[0])))
    return PC.Dataset(tuple(trajs), (float(times[0]), float(times[-1])))


class TestMakePath:
    def test_minimal(self):
        p = PC.make_path([0, 1], [[1], [2]])
        assert p.n_points == 2 and p.dim == 1

    def test_duplicate_time(self):
        with pytest.raises(NonMonotoneTimes):
            PC.make_path([0, 0], [[1], [2]])

    def test_nan(self):
        with pytest.raises(NonFiniteValue):
            PC.make_path([0, 1], [[1], [np.nan]])

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            PC.make_path([0, 1, 2], [[1], [2]])
        with pytest.raises(LengthMismatch):
            PC.make_path([0], [[1]])

    def test_immutable(self):
        p = PC.make_path([0, 1], [1.0, 2.0])
        with pytest.raises(ValueError):
            p.values[0, 0] = 5.0


class TestMask:
    def test_zero_fraction_is_noop(self, rng):
        p = PC.make_path(np.arange(10.0), np.arange(10.0))
        assert PC.mask_uniform(p, 0.0, rng) == p

    def test_daily_grid_count(self, rng):
        p = PC.make_path(np.arange(61.0), np.random.default_rng(1).normal(size=61))
        q = PC.mask_uniform(p, 0.3, rng)
        assert q.n_points == MASKED_DAILY_POINTS
        assert q.times[0] == 0.0 and q.values[0, 0] == p.values[0, 0]

    def test_deterministic(self):
        p = PC.make_path(np.arange(61.0), np.arange(61.0))
        a = PC.mask_uniform(p, 0.3, np.random.default_rng(7))
        b = PC.mask_uniform(p, 0.3, np.random.default_rng(7))
        assert a == b

    def test_too_few(self, rng):
        p = PC.make_path([0.0, 1.0, 2.0], [0.0, 1.0, 2.0])
        assert PC.mask_uniform(p, 0.5, rng).n_points == 2
        # floor(f (n - 1)) of the n - 1 droppable points always leaves the first plus one more
        for n in range(2, 12):
            assert PC.mask_uniform(PC.make_path(np.arange(float(n)), np.zeros(n)), 0.999, rng).n_points >= 2

    def test_fraction_domain(self, rng):
        with pytest.raises(ValueError):
            PC.mask_uniform(PC.make_path([0, 1], [0, 1]), 1.0, rng)


class TestInterpolate:
    def test_midpoint(self):
        assert PC.linear_interpolate(PC.make_path([0, 2], [0, 4]), 1.0)[0] == 2.0

    def test_knots(self):
        p = PC.make_path([0, 0.3, 1.7, 2], [1.0, -2.0, 5.0, 3.0])
        for t, v in zip(p.times, p.values):
            assert PC.linear_interpolate(p, t)[0] == v[0]

    def test_per_channel(self):
        p = PC.make_path([0, 1], [[1, 0], [1, 2]])
        np.testing.assert_allclose(PC.linear_interpolate(p, 0.25), [1.0, 0.5])

    def test_out_of_range(self):
        with pytest.raises(OutOfRange):
            PC.linear_interpolate(PC.make_path([0, 1], [0, 1]), 1.5)

    def test_hold_resample(self):
        p = PC.make_path([0, 1, 2], [5.0, 0.0, 3.0])
        q = PC.hold_resample(p, [0, 0.5, 1.0, 1.9, 2.5])
        np.testing.assert_array_equal(q.values[:, 0], [5, 5, 0, 0, 3])


class TestTimeAugment:
    def test_affine_channel(self):
        q = PC.time_augment(PC.make_path([0, 30, 60], [1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(q.values[:, 1], [0, 0.5, 1])

    def test_not_idempotent(self):
        p = PC.make_path([0, 1], [[1.0], [2.0]])
        assert PC.time_augment(PC.time_augment(p)).dim == 3

    def test_explicit_interval(self):
        q = PC.time_augment(PC.make_path([7.0, 14.0], [1.0, 1.0]), 0.0, 14.0)
        assert q.values[0, 1] == 0.5

    def test_original_channels_untouched(self):
        p = PC.make_path([0, 0.1, 1], [[0.1, 2], [0.3, 4], [1e-17, 1e17]])
        q = PC.time_augment(p)
        np.testing.assert_array_equal(q.values[:, :2], p.values)


class TestNorm:
    def test_control_bounds(self):
        s = PC.NormStats((0.0,), (1.0,), (0.0, 0.0), (5.0, 2.0))
        np.testing.assert_array_equal(s.encode_control([5.0, 0.0]), [1.0, 0.0])

    def test_zero_variance(self):
        with pytest.raises(ZeroVariance):
            PC.fit_norm(_ds([np.ones(5), np.ones(5)]))

    def test_degenerate_bounds(self):
        with pytest.raises(DegenerateBounds):
            PC.NormStats((0.0,), (1.0,), (1.0,), (1.0,))

    def test_log_guard(self):
        with pytest.raises(NonPositiveForLog):
            PC.fit_norm(_ds([np.array([1.0, -2.0, 3.0])]), "log")

    def test_round_trip_log(self):
        ds = _ds([np.array([1.0, 10.0, 100.0]), np.array([0.5, 2.0, 8.0])], [np.array([0, 5, 0.0])] * 2)
        s = PC.fit_norm(ds, "log", log_shift=(1e-8,))
        for tr in ds:
            z = PC.apply_norm(tr.state, s, "state")
            back = PC.invert_norm(z, s, "state")
            np.testing.assert_allclose(back.values, tr.state.values, rtol=1e-12)
        normed = PC.normalize_dataset(ds, s)
        states = np.concatenate([tr.state.values for tr in normed])
        np.testing.assert_allclose(states.mean(), 0.0, atol=1e-12)
        np.testing.assert_allclose(states.std(), 1.0, rtol=1e-12)

    def test_stats_serialize(self):
        s = PC.NormStats((0.1, 2.0), (1.0, 3.0), (0.0,), (5.0,), "log", (1e-8, 0.0))
        assert PC.NormStats.from_dict(json.loads(json.dumps(s.to_dict()))) == s


class TestSerialization:
    def test_bit_exact_round_trip(self, tmp_path, rng):
        times = np.cumsum(rng.uniform(0.1, 1.0, size=7))
        states = [rng.normal(size=7) * 10.0 ** rng.integers(-8, 8) for _ in range(3)]
        ds = _ds(states, [rng.uniform(0, 5, size=7) for _ in range(3)], times)
        PC.save_dataset(ds, tmp_path / "d")
        back = PC.load_dataset(tmp_path / "d")
        assert len(back) == 3 and back.interval == ds.interval
        for a, b in zip(ds, back):
            assert a.state == b.state and a.control == b.control
            np.testing.assert_array_equal(a.x0, b.x0)

    def test_missing(self, tmp_path):
        with pytest.raises(MissingArtifact):
            PC.load_dataset(tmp_path / "nothing")

    def test_shared_grid_enforced(self):
        with pytest.raises(LengthMismatch):
            PC.Trajectory(PC.make_path([0, 1], [0, 1]), PC.make_path([0, 2], [0, 1]), np.zeros(1))

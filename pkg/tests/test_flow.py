import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfd.flow import WeightSchedule, corrupt, sample_timesteps, schedule_weights


def _pair(rng, shape_x=(3, 4, 16), shape_a=(3, 8, 2)):
    return (rng.normal(size=shape_x), rng.normal(size=shape_a),
            rng.normal(size=shape_x), rng.normal(size=shape_a))


def test_sample_timesteps_reproducible():
    a = sample_timesteps(np.random.default_rng(3))
    b = sample_timesteps(np.random.default_rng(3))
    assert a == b
    assert all(0.0 <= t <= 1.0 for t in a)


def test_sample_timesteps_uniform_and_independent():
    tv, ta = sample_timesteps(np.random.default_rng(0), 10_000)
    assert abs(tv.mean() - 0.5) <= 0.02 and abs(ta.mean() - 0.5) <= 0.02
    assert abs(np.corrcoef(tv, ta)[0, 1]) <= 0.03


def test_endpoints_are_bitwise():
    x, a, ev, ea = _pair(np.random.default_rng(1))
    s1 = corrupt(x, a, 1.0, 1.0, ev, ea)
    s0 = corrupt(x, a, 0.0, 0.0, ev, ea)
    assert np.array_equal(s1.x_noisy, x) and np.array_equal(s1.a_noisy, a)
    assert np.array_equal(s0.x_noisy, ev) and np.array_equal(s0.a_noisy, ea)


def test_scalar_arithmetic_example():
    s = corrupt(np.array([2.0]), np.array([0.0]), 0.5, 0.5, np.array([0.0]), np.array([0.0]))
    assert s.x_noisy.tolist() == [1.0]


def test_midpoint_is_mean_of_endpoints():
    x, a, ev, ea = _pair(np.random.default_rng(2))
    mid = corrupt(x, a, 0.5, 0.5, ev, ea)
    assert np.max(np.abs(mid.x_noisy - 0.5 * (x + ev))) <= 1e-12
    assert np.max(np.abs(mid.a_noisy - 0.5 * (a + ea))) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(tv=st.floats(0, 1), ta=st.floats(0, 1), seed=st.integers(0, 2**16))
def test_interpolation_and_target_consistency(tv, ta, seed):
    x, a, ev, ea = _pair(np.random.default_rng(seed))
    s = corrupt(x, a, tv, ta, ev, ea)
    assert np.max(np.abs(s.x_noisy - ((1 - tv) * ev + tv * x))) <= 1e-12
    assert np.max(np.abs(s.a_noisy - ((1 - ta) * ea + ta * a))) <= 1e-12
    assert np.max(np.abs(s.u_target + ev - x)) <= 1e-12
    assert np.max(np.abs(s.v_target + ea - a)) <= 1e-12
    assert s.x_noisy.shape == x.shape and s.v_target.shape == a.shape


def test_per_element_timesteps_broadcast():
    rng = np.random.default_rng(4)
    x, a, ev, ea = _pair(rng)
    tv = np.array([0.0, 0.5, 1.0])
    s = corrupt(x, a, tv, 0.3, ev, ea)
    for i, t in enumerate(tv):
        ref = corrupt(x[i], a[i], t, 0.3, ev[i], ea[i])
        assert np.array_equal(s.x_noisy[i], ref.x_noisy)


@pytest.mark.parametrize("tau", [-0.1, 1.5])
def test_rejects_out_of_range_tau(tau):
    x, a, ev, ea = _pair(np.random.default_rng(5))
    with pytest.raises(ValueError):
        corrupt(x, a, tau, 0.5, ev, ea)
    with pytest.raises(ValueError):
        corrupt(x, a, 0.5, tau, ev, ea)


def test_rejects_noise_shape_mismatch():
    x, a, ev, ea = _pair(np.random.default_rng(6))
    with pytest.raises(ValueError):
        corrupt(x, a, 0.5, 0.5, ev[:, :2], ea)


def test_default_schedule_is_constant_one():
    sched = WeightSchedule()
    for tv, ta in [(0.0, 1.0), (1.0, 0.0), (0.37, 0.91)]:
        w_v, w_a = schedule_weights(sched, tv, ta)
        assert w_v == 1.0 and w_a == 1.0
        assert schedule_weights(sched, ta, tv) == (w_v, w_a)


def test_custom_schedule_must_be_positive():
    sched = WeightSchedule(video=lambda t: 1.0 - np.asarray(t))
    assert schedule_weights(sched, 0.2, 0.5)[0] == pytest.approx(0.8)
    with pytest.raises(ValueError):
        schedule_weights(sched, 1.0, 0.5)

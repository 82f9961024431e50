import numpy as np
import pytest
from hypothesis import given, strategies as st

from rissole.schedule import build_schedule, forward_diffuse, forward_diffuse_batch, forward_step


def test_single_step_schedule():
    s = build_schedule(1, 0.1, 0.1)
    np.testing.assert_allclose(s.beta, [0.1])
    np.testing.assert_allclose(s.alpha_bar, [0.9])
    np.testing.assert_allclose(s.sigma, [np.sqrt(0.1)])


def test_three_step_products():
    s = build_schedule(3, 0.1, 0.3)
    np.testing.assert_allclose(s.beta, [0.1, 0.2, 0.3])
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72, 0.504])


def test_standard_schedule_ends_near_noise():
    assert build_schedule(1000, 1e-4, 0.02).alpha_bar[-1] < 5e-5


def test_tables_are_read_only():
    s = build_schedule(5)
    with pytest.raises(ValueError):
        s.beta[0] = 0.5


@pytest.mark.parametrize("args", [(0, 0.1, 0.2), (5, 0.0, 0.1), (5, 0.3, 0.2), (5, 0.1, 1.0)])
def test_bad_bounds(args):
    with pytest.raises(ValueError):
        build_schedule(*args)


@given(st.integers(1, 300), st.floats(1e-5, 0.1), st.floats(0, 0.5))
def test_alpha_bar_monotone_in_unit_interval(T, lo, extra):
    hi = min(lo + extra, 0.99)
    s = build_schedule(T, lo, hi)
    assert np.all(np.diff(s.alpha_bar) <= 0)
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar < 1))
    np.testing.assert_allclose(s.alpha_bar, np.cumprod(1 - s.beta))


def test_forward_diffuse_branches():
    s = build_schedule(3, 0.1, 0.3)
    z0 = np.array([1.0, -2.0])
    np.testing.assert_allclose(forward_diffuse(s, z0, 3, np.zeros(2)), np.sqrt(0.504) * z0)
    eps = np.array([0.3, 0.7])
    np.testing.assert_allclose(forward_diffuse(s, np.zeros(2), 2, eps), np.sqrt(0.28) * eps)
    out = forward_diffuse(s, np.ones(1), 2, np.ones(1))
    np.testing.assert_allclose(out, [np.sqrt(0.72) + np.sqrt(0.28)], rtol=1e-14)
    assert abs(out[0] - 1.37766) < 5e-5  # the commonly quoted rounding


@pytest.mark.parametrize("t", [0, 4, -1])
def test_timestep_range(t):
    s = build_schedule(3, 0.1, 0.3)
    with pytest.raises(ValueError):
        forward_diffuse(s, np.ones(1), t, np.ones(1))
    with pytest.raises(ValueError):
        forward_step(s, np.ones(1), t, np.ones(1))


def test_forward_step_examples():
    s = build_schedule(1, 1e-12, 1e-12)
    z = np.array([0.4, -3.0])
    np.testing.assert_allclose(forward_step(s, z, 1, np.ones(2)), z, atol=1e-6)
    s = build_schedule(1, 0.25, 0.25)
    np.testing.assert_allclose(forward_step(s, np.zeros(1), 1, np.ones(1)), [0.5])


def test_batch_matches_scalar(rng):
    s = build_schedule(10, 0.01, 0.3)
    z0 = rng.normal(size=(6, 2, 3))
    eps = rng.normal(size=z0.shape)
    t = np.array([1, 3, 10, 4, 4, 7])
    out = forward_diffuse_batch(s, z0, t, eps)
    for j in range(6):
        np.testing.assert_allclose(out[j], forward_diffuse(s, z0[j], int(t[j]), eps[j]), rtol=1e-15)


def test_iterated_steps_match_closed_form_moments():
    s = build_schedule(10, 0.05, 0.3)
    rng = np.random.default_rng(0)
    n = 10**5
    z = np.full(n, 2.0)
    for t in range(1, 11):
        z = forward_step(s, z, t, rng.standard_normal(n))
    ab = s.alpha_bar[-1]
    mean, var = np.sqrt(ab) * 2.0, 1 - ab
    assert abs(z.mean() - mean) < 3 * np.sqrt(var / n)
    assert abs(z.var() - var) < 3 * var * np.sqrt(2 / (n - 1))

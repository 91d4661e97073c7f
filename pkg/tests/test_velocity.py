from __future__ import annotations

import math

import numpy as np
import pytest

from flowlab import rng as rngmod
from flowlab import velocity as ve
from flowlab.stats import mc_mean_ci


@pytest.fixture(scope="module")
def batch():
    return ve.CircleBatch.sample(1.0, 10, 2000, rngmod.stream(1, "circle-test"))


def test_test_function_derivatives():
    x = np.linspace(-3, 3, 41)
    h = 1e-5
    for f in (ve.circle_function("sin", 2), ve.circle_function("cos", 3), ve.bump_function(0.2, 0.7)):
        num = (f.f(x + h) - f.f(x - h)) / (2 * h)
        assert np.allclose(f.df(x), num, atol=1e-6), f.name
        num2 = (f.df(x + h) - f.df(x - h)) / (2 * h)
        assert np.allclose(2 * f.Af(x), num2, atol=1e-5), f.name


def test_bump_is_compactly_supported():
    f = ve.bump_function(0.0, 1.0)
    assert f.f(np.array([2.0, -2.0, 3.0])).tolist() == [0.0, 0.0, 0.0]
    assert f.f(np.array([0.0]))[0] > 0


def test_circle_function_rejects_high_modes():
    with pytest.raises(ValueError):
        ve.circle_function("sin", 5)


def test_covariance_at_diagonal():
    f = ve.circle_function("sin")
    assert float(ve.circle_covariance(f, f, 0.0, 0.0)) == 1.0
    assert float(ve.circle_covariance(f, f, 0.0, math.pi / 2)) == pytest.approx(0.0, abs=1e-16)


def test_constant_function_gives_exact_zeros(batch):
    c = ve.constant_function(2.0)
    assert np.all(batch.martingale_increment(c, 0.3, 0, 64) == 0.0)
    assert np.all(batch.sde_residual_samples(c, 0.3) == 0.0)


def test_single_cell_noise_sum_is_martingale_increment(batch):
    f = ve.circle_function("sin")
    a = batch.noise_sum(f, 0.4, 0)
    b = batch.martingale_increment(f, 0.4, 0, batch.dW.shape[1])
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_cauchy_defect_same_level_is_zero(batch):
    f = ve.circle_function("sin")
    assert ve.cauchy_defect(batch, f, 0.0, 6, 6) == (0.0, 0.0)


def test_level_error(batch):
    with pytest.raises(ve.LevelError):
        batch.increments(ve.circle_function("sin"), 0.0, 11)
    with pytest.raises(ve.LevelError):
        batch.martingale_increment(ve.circle_function("sin"), 0.0, 5, 5)


def test_martingale_mean_zero():
    f = ve.circle_function("cos")
    b = ve.CircleBatch.sample(0.5, 4, 100_000, rngmod.stream(2, "mart"))
    m, se = mc_mean_ci(b.martingale_increment(f, 0.7, 0, 16))
    assert abs(m) <= 4 * se


def test_martingale_variance_small_interval():
    f = ve.circle_function("sin")
    b = ve.CircleBatch.sample(0.01, 4, 50_000, rngmod.stream(3, "var"))
    m, se = mc_mean_ci(b.martingale_increment(f, 0.0, 0, 16) ** 2)
    # (t - s) C(f,f)(0,0) with an o(t - s) correction
    assert abs(m / 0.01 - 1.0) < 4 * se / 0.01 + 0.02


def test_noise_sum_variance(batch):
    f = ve.circle_function("sin")
    w = batch.noise_sum(f, 0.0, 8)
    m, se = mc_mean_ci((w - w.mean()) ** 2)
    assert abs(m - 1.0) <= 4 * se


def test_noise_sum_approaches_driver_projection(batch):
    f = ve.circle_function("sin")
    truth = batch.ground_truth(f, 0.0)
    d = [math.sqrt(np.mean((batch.noise_sum(f, 0.0, n) - truth) ** 2)) for n in (2, 4, 8)]
    assert d[0] > d[1] > d[2]


def test_cauchy_defects_decrease(batch):
    f = ve.circle_function("sin")
    d = [ve.cauchy_defect(batch, f, 0.0, n, 10)[0] for n in (2, 4, 8)]
    assert d[0] > d[1] > d[2] > 0


def test_coarsen_keeps_driver(batch):
    c = batch.coarsen(6)
    assert c.dW.shape == (2000, 64, 2)
    assert np.allclose(c.dW.sum(axis=1), batch.dW.sum(axis=1), atol=1e-12)
    assert np.array_equal(batch.coarsen(10).dW, batch.dW)


def test_sde_residual_shrinks_with_refinement(batch):
    f = ve.circle_function("sin")
    fine = np.mean(batch.sde_residual_samples(f, 0.0) ** 2)
    coarse = np.mean(batch.coarsen(6).sde_residual_samples(f, 0.0) ** 2)
    assert fine < coarse and fine < 5e-3


def test_milstein_rotated_form():
    x = np.array([0.3])
    d1, d2 = np.array([0.01]), np.array([-0.02])
    xi = math.sin(0.3) * 0.01 + math.cos(0.3) * -0.02
    eta = math.cos(0.3) * 0.01 - math.sin(0.3) * -0.02
    assert ve.milstein_step(x, d1, d2)[0] == pytest.approx(0.3 + xi + 0.5 * xi * eta, abs=1e-15)


def test_arratia_defect_stays_positive():
    m, se = ve.arratia_cauchy_defect(ve.bump_function(0.0, 1.0), 0.5, 1.0, 9, 4, 8, 600, 3)
    assert m > 10 * se


# chaos expansion


def test_chaos_order_zero_is_heat_value(batch):
    terms = ve.kv_terms(batch, "sin", 1, 0.3, 1)
    assert np.allclose(terms[0], math.exp(-0.5) * math.sin(0.3), atol=1e-12)


def test_chaos_order_limit():
    with pytest.raises(ve.ChaosOrderError):
        ve.kv_truncate(0.0, 0.25, "sin", 1, 7, 4, 10, 1)


def test_gap0_closed_form_matches_monte_carlo():
    r = ve.kv_truncate(0.4, 0.25, "sin", 1, 2, 8, 4000, 4)
    closed = ve.kv_gap0_closed_form("sin", 1, 0.4, 0.25)
    assert abs(r.gaps[0] - closed) <= 4 * r.stderr[0]
    assert r.gaps[0] > r.gaps[1] > r.gaps[2]


def test_gap0_closed_form_value():
    t = 0.25
    want = 0.5 * (1 - math.exp(-2 * t)) - 0.0
    assert ve.kv_gap0_closed_form("sin", 1, 0.0, t) == pytest.approx(want, abs=1e-15)

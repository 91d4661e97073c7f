from __future__ import annotations

import math

import numpy as np
import pytest

from flowlab import boundary as bd
from flowlab import rng as rngmod


def test_zero_drift_scale_is_flat():
    ss = bd.scale_speed(bd.power_profile(1.5))
    assert np.array_equal(ss.scale_derivative([1e-3, 0.5, 1.0]), [1.0, 1.0, 1.0])


def test_zero_drift_speed_density():
    ss = bd.scale_speed(bd.power_profile(1.5))
    r = np.array([1e-3, 0.1, 0.9])
    assert np.allclose(ss.speed_density(r), r**-1.5, rtol=1e-14)


def test_constant_drift_scale_closed_form():
    b, s2, c = 0.3, 2.0, 1.0
    prof = bd.DiffusionProfile(lambda r: np.full_like(np.asarray(r, float), s2), 0.0, s2, c,
                               lambda r: np.full_like(np.asarray(r, float), b))
    r = np.array([1e-4, 0.2, 0.7])
    got = bd.scale_speed(prof).scale_derivative(r)
    want = np.exp(-2 * b * (r - c) / s2)
    assert np.max(np.abs(got / want - 1)) < 1e-8


@pytest.mark.parametrize("alpha", [0.5, 0.8])
def test_power_profile_closed_form_integrals(alpha):
    # s = r, m = r^-alpha: u = c^(2-alpha)/(2-alpha), v = c^(2-alpha)/((1-alpha)(2-alpha))
    fi = bd.feller_integrals(bd.power_profile(alpha))
    assert fi.u == pytest.approx(1 / (2 - alpha), rel=1e-8)
    assert fi.v == pytest.approx(1 / ((1 - alpha) * (2 - alpha)), rel=1e-8)


def test_feller_flags_by_exponent():
    fi = bd.feller_integrals(bd.power_profile(0.5))
    assert fi.u_finite and fi.v_finite
    fi = bd.feller_integrals(bd.power_profile(1.5))
    assert fi.u_finite and not fi.v_finite
    fi = bd.feller_integrals(bd.power_profile(2.5))
    assert not fi.u_finite and not fi.v_finite


@pytest.mark.parametrize("alpha,cls", [(0.5, "regular"), (1.5, "exit"), (2.5, "natural")])
def test_classify_power_profiles(alpha, cls):
    assert bd.classify(bd.power_profile(alpha)).boundary == cls


def test_critical_exponents_use_declared_power():
    assert bd.classify(bd.power_profile(1.0)).boundary == "exit"
    assert bd.classify(bd.power_profile(2.0)).boundary == "natural"


@pytest.mark.parametrize("alpha,cls", [(1.0, "exit"), (0.2, "regular"), (3.0, "natural")])
def test_sobolev_profile_classes(alpha, cls):
    p = bd.sobolev_d1_profile(alpha)
    assert p.exponent == min(alpha, 2.0)
    assert bd.classify(p).boundary == cls


def test_sobolev_rejects_alpha_two():
    with pytest.raises(ValueError):
        bd.sobolev_d1_profile(2.0)


def test_taxonomy_pairing_enforced():
    assert bd.classify_flags(True, True).taxonomy == "turbulent-with-hit"
    assert bd.classify_flags(False, True).boundary == "entrance"
    with pytest.raises(ValueError):
        bd.PhaseClass("natural", "coalescing-maps")


def test_scan_groups():
    rows = bd.phase_scan([0.2, 0.5, 0.8, 1.0, 1.5, 1.9])
    assert [r.boundary for r in rows] == ["regular"] * 3 + ["exit"] * 3


def test_scan_threads_give_same_rows():
    a = bd.phase_scan([0.3, 1.3, 2.7], threads=1)
    b = bd.phase_scan([0.3, 1.3, 2.7], threads=3)
    assert a == b


def test_scan_records_errors_and_continues():
    rows = bd.phase_scan([0.5, 2.0, 1.5])
    assert rows[1].boundary == "error" and "alpha = 2" in rows[1].error
    assert rows[2].boundary == "exit"


def test_constant_sigma_is_regular():
    prof = bd.DiffusionProfile(lambda r: np.ones_like(np.asarray(r, float)), 0.0, 1.0)
    assert bd.classify(prof).boundary == "regular"


def test_scaling_and_cutoff_invariance():
    for a in (0.4, 1.2, 3.1):
        p = bd.sobolev_d1_profile(a)
        cls = bd.classify(p).boundary
        for q in (p.scaled(0.1), p.scaled(10.0), p.with_cutoff(p.c / 2)):
            assert bd.classify(q).boundary == cls


def test_inconsistent_declared_exponent_rejected():
    with pytest.raises(ValueError):
        bd.DiffusionProfile(lambda r: np.asarray(r, float) ** 1.5, 1.0, 1.0)


def test_inconclusive_with_drift_near_critical():
    # r^-1 integrand with a drift present cannot be settled by the declared exponent
    prof = bd.DiffusionProfile(lambda r: np.asarray(r, float) ** 2, 2.0, 1.0, 1.0,
                               lambda r: 1e-12 * np.asarray(r, float))
    with pytest.raises(bd.InconclusiveError):
        bd.feller_integrals(prof)


def test_phase_csv_layout():
    text = bd.phase_csv(bd.phase_scan([0.5]))
    assert text.splitlines() == ["alpha_or_label,u_flag,v_flag,class,taxonomy",
                                 "0.5,finite,finite,regular,turbulent-with-hit"]


# user tables

TABLE = "# exponent: 1.5\nr,value\n" + "".join(
    f"{float(r)!r},{float(r) ** 1.5!r}\n" for r in np.geomspace(1e-3, 1.0, 30))


def test_table_profile_reproduces_power_law():
    prof = bd.table_profile(TABLE, label="tab")
    r = np.array([1e-6, 0.01, 0.5])
    assert np.allclose(prof.sigma2(r), r**1.5, rtol=1e-6)
    assert bd.classify(prof).boundary == "exit"


def test_table_needs_exponent_header():
    with pytest.raises(ValueError):
        bd.read_profile_table("r,value\n0.1,1\n0.2,2\n")


def test_table_with_drift():
    mu = "# exponent: 2\n" + "".join(f"{float(r)!r},{0.1 * float(r) ** 2!r}\n" for r in np.geomspace(1e-3, 1, 20))
    prof = bd.table_profile(TABLE, mu)
    assert bd.classify(prof).boundary == "exit"


# Monte Carlo accessibility


def test_bessel_hitting_probability_limits():
    assert bd.bessel_hit_probability(1.0, 0.5, 1e6) == pytest.approx(1.0, abs=1e-2)
    assert bd.bessel_hit_probability(1.0, 0.5, 1e-6) < 1e-6
    with pytest.raises(ValueError):
        bd.bessel_hit_probability(2.5, 0.5, 10.0)


def test_euler_hit_fraction_agrees_with_exact_law():
    g = rngmod.stream(1, "euler")
    frac = bd.euler_hit_fraction(1.5, 0.5, 1e-4, 10.0, 1e-3, 2000, g)
    exact = bd.bessel_hit_probability(1.5, 0.5, 10.0)
    assert abs(frac - exact) < 4 * math.sqrt(exact * (1 - exact) / 2000) + 0.01


def test_euler_inaccessible_for_natural_boundary():
    g = rngmod.stream(2, "euler")
    assert bd.euler_hit_fraction(2.5, 0.5, 1e-4, 10.0, 1e-2, 500, g) < 0.01

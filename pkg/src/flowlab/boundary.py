"""Feller classification of the boundary at 0 for the two-point distance.

The distance process ``dr = mu(r) dt + sqrt(sigma2(r)) dB`` on ``(0, c]`` has
scale derivative ``s'(r) = exp(-int_c^r 2 mu / sigma2)`` and speed density
``m = 1 / (s' sigma2)``.  Two integrals decide the class:

* ``u = int_0^c (s(r) - s(0+)) m(r) dr``  (finite iff 0 is accessible),
* ``v = int_0^c m((0, r]) s'(r) dr``       (finite iff 0 is an entrance).

Both are split into octaves ``[c 2^-(j+1), c 2^-j]`` for ``j < 60``; the
log2-slope of the octave contributions decides convergence.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import chebyshev as cheb
from scipy import integrate

Profile = Callable[[np.ndarray], np.ndarray]

OCTAVES = 60
SLOPE_BAND = 1e-4
FIT_OCTAVES = 20
CHEB_NODES = 32

TAXONOMY = {
    "natural": "noncoalescing-maps",
    "exit": "coalescing-maps",
    "entrance": "turbulent-no-hit",
    "regular": "turbulent-with-hit",
}


class InconclusiveError(RuntimeError):
    """Octave slope fell inside the undecidable band."""


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not converge on the drift integral."""


@dataclass(frozen=True, eq=False)
class DiffusionProfile:
    """Drift and squared diffusion of the distance process on ``(0, c]``.

    ``sigma2 ~ coefficient * r**exponent`` at 0+.  ``mu = None`` means zero
    drift.  The declared asymptotics are checked on ``r < c/100``.
    """

    sigma2: Profile
    exponent: float
    coefficient: float
    c: float = 1.0
    mu: Profile | None = None
    label: str = ""

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("cutoff must be positive")
        if not self.coefficient > 0:
            raise ValueError("asymptotic coefficient must be positive")
        r = self.c * np.geomspace(1.0, 1e-6, 25)
        s = np.asarray(self.sigma2(r), dtype=float)
        if np.any(~np.isfinite(s)) or np.any(s <= 0):
            raise ValueError("sigma2 must be positive on (0, c]")
        small = r / 100
        ratio = np.asarray(self.sigma2(small), float) / (self.coefficient * small**self.exponent)
        if np.max(np.abs(ratio - 1)) >= 0.05:
            raise ValueError("declared power law does not match sigma2 near 0 "
                             f"(worst ratio {ratio[np.argmax(np.abs(ratio - 1))]:.4g})")

    def scaled(self, lam: float) -> "DiffusionProfile":
        """``(lam mu, lam sigma2)``: a deterministic time change."""
        mu = None if self.mu is None else (lambda r, f=self.mu: lam * f(r))
        return DiffusionProfile(lambda r, f=self.sigma2: lam * f(r), self.exponent,
                                lam * self.coefficient, self.c, mu, self.label)

    def with_cutoff(self, c: float) -> "DiffusionProfile":
        return DiffusionProfile(self.sigma2, self.exponent, self.coefficient, c, self.mu, self.label)


def power_profile(alpha: float, c: float = 1.0, k: float = 1.0) -> DiffusionProfile:
    """``sigma2 = k r^alpha`` with no drift."""
    return DiffusionProfile(lambda r: k * np.asarray(r, float) ** alpha, alpha, k, c,
                            label=f"{alpha:g}")


def sobolev_d1_profile(alpha: float, b0: float = 1.0) -> DiffusionProfile:
    """Distance profile of a one-dimensional isotropic field.

    ``b(r) = b0 exp(-r^a)`` with ``a = min(alpha, 2)`` gives
    ``sigma2 = 2 (b(0) - b(r)) ~ 2 b0 r^a`` and no drift.  The cutoff is
    taken small enough that the power law holds to 5% below ``c/100``.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if alpha == 2:
        raise ValueError("alpha = 2 is the log-critical case and is not supported")
    a = min(alpha, 2.0)
    c = min(1.0, 100 * 0.08 ** (1 / a))
    sig = lambda r: 2 * b0 * -np.expm1(-np.asarray(r, float) ** a)  # noqa: E731
    return DiffusionProfile(sig, a, 2 * b0, c, label=f"{alpha:g}")


# ---------------------------------------------------------------------------
# scale and speed


@dataclass(frozen=True, eq=False)
class ScaleSpeed:
    profile: DiffusionProfile

    def _drift_ratio(self, r):
        p = self.profile
        return 2 * p.mu(r) / p.sigma2(r)

    def log_scale_derivative(self, r: float) -> float:
        """``-int_c^r 2 mu / sigma2`` by adaptive quadrature."""
        p = self.profile
        if p.mu is None or r == p.c:
            return 0.0
        val, err, info = _quad(lambda x: float(self._drift_ratio(np.array([x]))[0]), r, p.c)
        return val

    def scale_derivative(self, r) -> np.ndarray:
        r = np.atleast_1d(np.asarray(r, float))
        return np.exp([self.log_scale_derivative(float(x)) for x in r])

    def speed_density(self, r) -> np.ndarray:
        r = np.atleast_1d(np.asarray(r, float))
        return 1.0 / (self.scale_derivative(r) * self.profile.sigma2(r))


def scale_speed(profile: DiffusionProfile) -> ScaleSpeed:
    return ScaleSpeed(profile)


def _quad(fn, a, b):
    """Adaptive quadrature; QUADPACK warnings are fatal only if the error estimate is large."""
    import warnings

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", integrate.IntegrationWarning)
        val, err = integrate.quad(fn, a, b, limit=200, epsabs=1e-14, epsrel=1e-10)
    if not math.isfinite(val):
        raise QuadratureError(f"drift integral on [{a:.3g}, {b:.3g}] is not finite")
    if caught and err > 1e-8 * abs(val) + 1e-12:
        raise QuadratureError(f"drift integral on [{a:.3g}, {b:.3g}] failed: "
                              f"{str(caught[0].message).split('.')[0]} (error estimate {err:.3g})")
    return val, err, None


# ---------------------------------------------------------------------------
# Feller integrals


@dataclass(frozen=True)
class Tail:
    """Octave contributions of one integral and the convergence verdict."""

    contributions: np.ndarray
    slope: float
    finite: bool
    value: float
    decided_by: str
    remainder: float = 0.0


@dataclass(frozen=True)
class FellerIntegrals:
    u: float
    v: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def u_finite(self) -> bool:
        return math.isfinite(self.u)

    @property
    def v_finite(self) -> bool:
        return math.isfinite(self.v)


def _octave_slope(a: np.ndarray) -> float:
    j = np.arange(a.size)[-FIT_OCTAVES:]
    y = np.log2(np.abs(a[-FIT_OCTAVES:]))
    return float(np.polyfit(j, y, 1)[0])


def _decide(a: np.ndarray, name: str, critical: float | None) -> Tail:
    """Convergence of ``sum_j a_j`` from the octave slope.

    ``critical`` is the analytically known integrand exponent at 0 (or None
    when unknown); it is used only inside the inconclusive band.
    """
    if np.all(a == 0):
        return Tail(a, -math.inf, True, 0.0, "zero")
    slope = _octave_slope(a)
    if slope <= -SLOPE_BAND:
        rho = 2.0**slope
        tail = a[-1] * rho / (1 - rho)
        return Tail(a, slope, True, float(math.fsum(a) + tail), "slope", float(tail))
    if slope >= SLOPE_BAND:
        return Tail(a, slope, False, math.inf, "slope")
    if critical is not None and abs(critical + 1) < 1e-12:
        return Tail(a, slope, False, math.inf, "declared exponent (logarithmic divergence)")
    raise InconclusiveError(f"{name}: octave slope {slope:.3g} is inside +-{SLOPE_BAND:g}")


def feller_integrals(profile: DiffusionProfile) -> FellerIntegrals:
    """Evaluate ``u`` and ``v`` octave by octave with power-law extrapolation.

    Within an octave the integrands are interpolated by Chebyshev series in
    ``y = -log2(r / c)`` and integrated exactly; inner cumulative integrals use
    the antiderivative of the same series.  A slope in the band
    ``+-1e-4`` is resolved only when the drift is zero and the declared
    exponent makes the integrand exactly ``r^-1``; otherwise
    :class:`InconclusiveError` is raised.
    """
    c = profile.c
    ss = ScaleSpeed(profile)
    ln2 = math.log(2.0)
    xk = cheb.chebpts2(CHEB_NODES)  # mapped to y in [j, j+1] per octave r = c 2^-y
    s_series, m_series = [], []
    log_sp_end = 0.0  # log s' at the right end of the current octave
    for j in range(OCTAVES):
        y = j + 0.5 * (xk + 1)  # y in [j, j+1]
        r = c * 2.0**-y
        if profile.mu is None:
            log_sp = np.zeros_like(r)
        else:
            r_right = c * 2.0**-j
            log_sp = np.array([log_sp_end + _quad(
                lambda x: float(ss._drift_ratio(np.array([x]))[0]), float(ri), r_right)[0]
                if ri < r_right else log_sp_end for ri in r])
            log_sp_end = log_sp[np.argmax(y)]
        sp = np.exp(log_sp)
        m = 1.0 / (sp * np.asarray(profile.sigma2(r), float))
        jac = r * ln2  # dr = -r ln2 dy
        s_series.append(cheb.Chebyshev.fit(y, sp * jac, CHEB_NODES - 1, domain=[j, j + 1]))
        m_series.append(cheb.Chebyshev.fit(y, m * jac, CHEB_NODES - 1, domain=[j, j + 1]))

    def octave_totals(series):
        return np.array([s.integ()(j + 1) - s.integ()(j) for j, s in enumerate(series)])

    alpha = profile.exponent
    drift_free = profile.mu is None
    s_tot = octave_totals(s_series)
    m_tot = octave_totals(m_series)
    s_tail = _decide(s_tot, "scale", 0.0 if drift_free else None)
    m_tail = _decide(m_tot, "speed mass", -alpha if drift_free else None)
    diag = {"scale": s_tail, "speed_mass": m_tail}

    def nested(outer, inner_series, inner_tot, inner_tail):
        """Octave totals of ``int outer(r) * (int_0^r inner) dr``."""
        out = np.empty(OCTAVES)
        below = np.empty(OCTAVES)
        acc = inner_tail.remainder
        for j in range(OCTAVES - 1, -1, -1):
            below[j] = acc
            acc += inner_tot[j]
        for j in range(OCTAVES):
            anti = inner_series[j].integ()
            # int from r(y) down to r(j+1): anti(j+1) - anti(y), plus mass below the octave
            cum = lambda y, j=j, anti=anti: below[j] + (anti(j + 1) - anti(y))  # noqa: E731
            ys = j + 0.5 * (xk + 1)
            prod = cheb.Chebyshev.fit(ys, outer[j](ys) * cum(ys), CHEB_NODES - 1, domain=[j, j + 1])
            pi = prod.integ()
            out[j] = pi(j + 1) - pi(j)
        return out

    if not s_tail.finite:
        u_tail = Tail(np.array([]), math.nan, False, math.inf, "s(0+) = -inf")
    else:
        u_oct = nested(m_series, s_series, s_tot, s_tail)
        u_tail = _decide(u_oct, "u", 1 - alpha if drift_free else None)
    if not m_tail.finite:
        v_tail = Tail(np.array([]), math.nan, False, math.inf, "speed mass of (0, r] infinite")
    else:
        v_oct = nested(s_series, m_series, m_tot, m_tail)
        v_tail = _decide(v_oct, "v", 1 - alpha if drift_free else None)
    diag.update(u=u_tail, v=v_tail)
    return FellerIntegrals(u_tail.value, v_tail.value, diag)


# ---------------------------------------------------------------------------
# classification


@dataclass(frozen=True)
class PhaseClass:
    boundary: str
    taxonomy: str

    def __post_init__(self):
        if TAXONOMY.get(self.boundary) != self.taxonomy:
            raise ValueError("boundary class and flow taxonomy do not match")


def classify_flags(u_finite: bool, v_finite: bool) -> PhaseClass:
    if u_finite and v_finite:
        b = "regular"
    elif u_finite:
        b = "exit"
    elif v_finite:
        b = "entrance"
    else:
        b = "natural"
    return PhaseClass(b, TAXONOMY[b])


def classify(profile: DiffusionProfile) -> PhaseClass:
    fi = feller_integrals(profile)
    return classify_flags(fi.u_finite, fi.v_finite)


@dataclass(frozen=True)
class PhaseRow:
    label: str
    u_flag: str
    v_flag: str
    boundary: str
    taxonomy: str
    error: str = ""


def _row(label: str, profile_fn) -> PhaseRow:
    try:
        profile = profile_fn()
        fi = feller_integrals(profile)
        pc = classify_flags(fi.u_finite, fi.v_finite)
        flag = lambda v: "finite" if math.isfinite(v) else "inf"  # noqa: E731
        return PhaseRow(label, flag(fi.u), flag(fi.v), pc.boundary, pc.taxonomy)
    except (InconclusiveError, QuadratureError, ValueError) as exc:
        return PhaseRow(label, "?", "?", "error", "error", str(exc))


def phase_scan(alphas: Sequence[float] = (), profiles: Sequence[tuple[str, object]] = (),
               threads: int = 1) -> list[PhaseRow]:
    """Classify Sobolev ``d = 1`` profiles for each alpha, then any user profiles.

    Errors are recorded per row and the scan continues.
    """
    jobs = [(f"{a:g}", (lambda a=a: sobolev_d1_profile(a))) for a in alphas]
    jobs += [(lab, (lambda p=p: p)) for lab, p in profiles]
    if not jobs:
        raise ValueError("nothing to scan")
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda j: _row(*j), jobs))
    return [_row(*j) for j in jobs]


def phase_csv(rows: Sequence[PhaseRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha_or_label", "u_flag", "v_flag", "class", "taxonomy"])
    for r in rows:
        w.writerow([r.label, r.u_flag, r.v_flag, r.boundary, r.taxonomy])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# user tables


def read_profile_table(text: str) -> tuple[np.ndarray, np.ndarray, float]:
    """Two-column ``r,value`` CSV with a ``# exponent: a`` comment line."""
    exponent = None
    rows = []
    for line in text.splitlines():
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            m = re.search(r"exponent\s*[:=]\s*([-+0-9.eE]+)", s)
            if m:
                exponent = float(m.group(1))
            continue
        parts = [p.strip() for p in s.split(",")]
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except (ValueError, IndexError):
            if rows:
                raise ValueError(f"bad table row: {line!r}") from None
    if exponent is None:
        raise ValueError("profile table lacks a '# exponent: ...' header line")
    if len(rows) < 2:
        raise ValueError("profile table needs at least two rows")
    arr = np.array(sorted(rows))
    if np.any(arr[:, 0] <= 0) or np.any(np.diff(arr[:, 0]) <= 0):
        raise ValueError("r values must be positive and distinct")
    return arr[:, 0], arr[:, 1], exponent


def table_profile(sigma_text: str, mu_text: str | None = None, label: str = "") -> DiffusionProfile:
    """Profile from tabulated values.

    Inside the table ``sigma2`` is interpolated log-log and ``mu`` linearly.
    Below the first row each is continued by its declared power law anchored
    at that row; the cutoff is the last tabulated ``r``.
    """
    r, s, a = read_profile_table(sigma_text)
    if np.any(s <= 0):
        raise ValueError("sigma2 values must be positive")
    k = s[0] / r[0] ** a
    lr, ls = np.log(r), np.log(s)

    def sigma2(x):
        x = np.asarray(x, float)
        inside = np.exp(np.interp(np.log(np.maximum(x, r[0])), lr, ls))
        return np.where(x < r[0], k * x**a, inside)

    mu = None
    if mu_text is not None:
        rm, vm, b = read_profile_table(mu_text)

        def mu(x):
            x = np.asarray(x, float)
            return np.where(x < rm[0], vm[0] * (x / rm[0]) ** b, np.interp(x, rm, vm))

    return DiffusionProfile(sigma2, a, k, float(r[-1]), mu, label)


# ---------------------------------------------------------------------------
# Monte Carlo accessibility


def euler_hit_fraction(alpha: float, r0: float, level: float, horizon: float, dt: float,
                       runs: int, rng: np.random.Generator) -> float:
    """Fraction of Euler paths of ``dr = r^(alpha/2) dB`` reaching ``level`` by ``horizon``."""
    r = np.full(runs, float(r0))
    alive = np.ones(runs, dtype=bool)
    sq = math.sqrt(dt)
    for _ in range(int(round(horizon / dt))):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        ri = r[idx]
        ri = ri + ri ** (alpha / 2) * sq * rng.standard_normal(idx.size)
        r[idx] = ri
        alive[idx[ri <= level]] = False
    return float(np.mean(~alive))


def bessel_hit_probability(alpha: float, r0: float, horizon: float) -> float:
    """``P[H_0 <= horizon]`` for ``dr = r^(alpha/2) dB`` with ``alpha < 2``.

    ``Y = r^(1-g)/(1-g)`` with ``g = alpha/2`` is a Bessel process of
    dimension ``d = (1-2g)/(1-g) < 2``, whose hitting time of 0 from ``y`` is
    distributed as ``y^2 / (2 G)`` with ``G ~ Gamma(1 - d/2)``.
    """
    from scipy.stats import gamma

    if not 0 < alpha < 2:
        raise ValueError("formula needs 0 < alpha < 2")
    g = alpha / 2
    d = (1 - 2 * g) / (1 - g)
    y0 = r0 ** (1 - g) / (1 - g)
    return float(gamma.sf(y0 * y0 / (2 * horizon), 1 - d / 2))

"""Monte Carlo verdict machinery: accumulators, goodness-of-fit tests, reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special, stats as sps

Z_THRESHOLD = 4.0
P_THRESHOLD = 1e-3

HEADER = ("experiment", "statistic", "estimate", "stderr", "oracle", "z_score", "verdict")


class StatsError(ValueError):
    """Raised when a statistical routine gets input it cannot judge."""


# ---------------------------------------------------------------------------
# accumulators


@dataclass
class Accumulator:
    """Mergeable first and second moments.

    Each batch is reduced with :func:`math.fsum` and the batch sums are kept,
    so the totals are the correctly rounded sum of the stored partials.  That
    makes :meth:`merge` associative and commutative up to the final rounding.
    """

    count: int = 0
    _sums: list[float] = field(default_factory=list)
    _squares: list[float] = field(default_factory=list)

    def add(self, samples: Iterable[float] | np.ndarray) -> "Accumulator":
        x = np.asarray(samples, dtype=float).ravel()
        if x.size:
            self.count += int(x.size)
            self._sums.append(math.fsum(x))
            self._squares.append(math.fsum(x * x))
        return self

    def merge(self, other: "Accumulator") -> "Accumulator":
        out = Accumulator(self.count + other.count)
        out._sums = self._sums + other._sums
        out._squares = self._squares + other._squares
        return out

    @property
    def sum(self) -> float:
        return math.fsum(self._sums)

    @property
    def sum_of_squares(self) -> float:
        return math.fsum(self._squares)

    def mean(self) -> float:
        if self.count == 0:
            raise StatsError("empty accumulator")
        return self.sum / self.count

    def variance(self) -> float:
        """Unbiased sample variance."""
        if self.count < 2:
            raise StatsError("variance needs at least two samples")
        n = self.count
        m = self.sum / n
        v = (self.sum_of_squares - n * m * m) / (n - 1)
        return max(v, 0.0)


def mc_mean_ci(data: Accumulator | Sequence[float] | np.ndarray) -> tuple[float, float]:
    """Mean and standard error ``std / sqrt(n)``.

    Array input uses a two-pass formula; an :class:`Accumulator` uses its
    stored moments.
    """
    if isinstance(data, Accumulator):
        if data.count < 2:
            raise StatsError("need at least two samples")
        return data.mean(), math.sqrt(data.variance() / data.count)
    x = np.asarray(data, dtype=float).ravel()
    if x.size < 2:
        raise StatsError("need at least two samples")
    m = math.fsum(x) / x.size
    v = math.fsum((x - m) ** 2) / (x.size - 1)
    return m, math.sqrt(v / x.size)


# ---------------------------------------------------------------------------
# distribution tests


def ks_statistic(samples: np.ndarray, cdf: Callable[[np.ndarray], np.ndarray]) -> float:
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    f = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - f), np.max(f - (i - 1) / n)))


def ks_test(samples: np.ndarray, cdf: Callable[[np.ndarray], np.ndarray]) -> tuple[float, float]:
    """One-sample Kolmogorov-Smirnov test with the asymptotic p-value."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 20:
        raise StatsError("KS test needs n >= 20")
    d = ks_statistic(x, cdf)
    return d, float(special.kolmogorov(math.sqrt(x.size) * d))


def censored_ks(
    samples: np.ndarray, cdf: Callable[[np.ndarray], np.ndarray], upper: float
) -> float:
    """Sup distance between empirical and target CDF on ``(-inf, upper]``.

    Samples above ``upper`` (including ``inf``) count only through the
    empirical CDF staying below one.
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n < 20:
        raise StatsError("KS test needs n >= 20")
    k = int(np.searchsorted(x, upper, side="right"))
    d = 0.0
    if k:
        xs = x[:k]
        f = np.asarray(cdf(xs), dtype=float)
        i = np.arange(1, k + 1)
        d = float(max(np.max(i / n - f), np.max(f - (i - 1) / n)))
    d = max(d, abs(float(cdf(np.array([upper]))[0]) - k / n))
    return d


def ks_2samp(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Two-sample KS statistic and p-value."""
    r = sps.ks_2samp(np.ravel(a), np.ravel(b))
    return float(r.statistic), float(r.pvalue)


def chi_square(counts: Sequence[float], expected_probs: Sequence[float]) -> tuple[float, float]:
    """Pearson goodness-of-fit statistic with ``k - 1`` degrees of freedom."""
    c = np.asarray(counts, dtype=float)
    p = np.asarray(expected_probs, dtype=float)
    if c.shape != p.shape or c.ndim != 1 or c.size < 2:
        raise StatsError("counts and probabilities must be matching 1-d arrays")
    if abs(p.sum() - 1.0) > 1e-9 or np.any(p < 0):
        raise StatsError("expected probabilities must form a distribution")
    e = c.sum() * p
    if np.any(e < 5):
        raise StatsError("every expected count must be at least 5")
    stat = float(np.sum((c - e) ** 2 / e))
    return stat, float(sps.chi2.sf(stat, c.size - 1))


def anderson_normal(samples: np.ndarray) -> tuple[float, float]:
    """Anderson-Darling normality test with estimated mean and variance.

    Returns the statistic and an approximate p-value from the standard
    piecewise formula for the size-adjusted statistic.
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n < 8:
        raise StatsError("Anderson-Darling test needs n >= 8")
    z = (x - x.mean()) / x.std(ddof=1)
    logcdf = sps.norm.logcdf(z)
    logsf = sps.norm.logsf(z)
    i = np.arange(1, n + 1)
    a2 = -n - np.sum((2 * i - 1) * (logcdf + logsf[::-1])) / n
    a = a2 * (1 + 0.75 / n + 2.25 / n**2)
    if a >= 0.6:
        p = math.exp(1.2937 - 5.709 * a + 0.0186 * a * a)
    elif a >= 0.34:
        p = math.exp(0.9177 - 4.279 * a - 1.38 * a * a)
    elif a >= 0.2:
        p = 1 - math.exp(-8.318 + 42.796 * a - 59.938 * a * a)
    else:
        p = 1 - math.exp(-13.436 + 101.14 * a - 223.73 * a * a)
    return float(a2), float(min(max(p, 0.0), 1.0))


def z_score(estimate: float, stderr: float, oracle: float) -> float:
    diff = estimate - oracle
    if stderr > 0:
        return diff / stderr
    return 0.0 if diff == 0 else math.copysign(math.inf, diff)


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class Row:
    """One verdict line.

    ``rule`` names how the verdict was reached and is printed next to the
    statistic name, so every row states its own threshold.
    """

    experiment: str
    statistic: str
    estimate: float
    stderr: float
    oracle: float
    z_score: float
    verdict: str
    rule: str = ""

    def as_dict(self) -> dict:
        name = f"{self.statistic} [{self.rule}]" if self.rule else self.statistic
        return {
            "experiment": self.experiment,
            "statistic": name,
            "estimate": self.estimate,
            "stderr": self.stderr,
            "oracle": self.oracle,
            "z_score": self.z_score,
            "verdict": self.verdict,
        }


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class ExperimentReport:
    """Append-only collection of verdict rows."""

    experiment: str
    rows: list[Row] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def _add(self, row: Row) -> Row:
        self.rows.append(row)
        return row

    def add_z(self, statistic: str, estimate: float, stderr: float, oracle: float,
              threshold: float = Z_THRESHOLD) -> Row:
        """Oracle comparison: pass iff ``|z| <= threshold``."""
        z = z_score(estimate, stderr, oracle)
        ok = abs(z) <= threshold
        return self._add(Row(self.experiment, statistic, float(estimate), float(stderr),
                             float(oracle), float(z), "pass" if ok else "fail",
                             f"|z|<={threshold:g}"))

    def add_pvalue(self, statistic: str, p_value: float, threshold: float = P_THRESHOLD) -> Row:
        """Distributional test: pass iff ``p >= threshold``.

        The z column holds the two-sided normal score of the p-value.
        """
        z = float(sps.norm.isf(p_value / 2)) if p_value > 0 else math.inf
        ok = p_value >= threshold
        return self._add(Row(self.experiment, statistic, float(p_value), math.nan,
                             float(threshold), z, "pass" if ok else "fail",
                             f"p>={threshold:g}"))

    def add_bound(self, statistic: str, value: float, bound: float, stderr: float = math.nan,
                  upper: bool = True) -> Row:
        """Hard bound: pass iff ``value < bound`` (or ``>`` when ``upper`` is False).

        The z column holds ``value / bound``.
        """
        ok = value < bound if upper else value > bound
        z = value / bound if bound else math.nan
        rule = f"<{bound:g}" if upper else f">{bound:g}"
        return self._add(Row(self.experiment, statistic, float(value), float(stderr),
                             float(bound), float(z), "pass" if ok else "fail", rule))

    def add_gap(self, statistic: str, gap: float, stderr: float, factor: float = 4.0) -> Row:
        """Positivity test: pass iff ``gap > factor * stderr``."""
        z = z_score(gap, stderr, 0.0)
        ok = gap > 0 and z > factor
        return self._add(Row(self.experiment, statistic, float(gap), float(stderr), 0.0,
                             float(z), "pass" if ok else "fail", f"z>{factor:g}"))

    def add_check(self, statistic: str, ok: bool, value: float = math.nan) -> Row:
        """Exact assertion recorded as a row."""
        return self._add(Row(self.experiment, statistic, float(value), 0.0, math.nan,
                             0.0 if ok else math.inf, "pass" if ok else "fail", "exact"))

    def add_error(self, statistic: str, message: str) -> Row:
        return self._add(Row(self.experiment, f"{statistic}: {message}", math.nan, math.nan,
                             math.nan, math.nan, "inconclusive", "error"))

    def extend(self, other: "ExperimentReport") -> None:
        self.rows.extend(other.rows)

    @property
    def passed(self) -> bool:
        return bool(self.rows) and all(r.verdict == "pass" for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k in sorted(self.config):
            buf.write(f"# {k} = {self.config[k]}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEADER)
        for r in self.rows:
            d = r.as_dict()
            w.writerow([_fmt(d[h]) for h in HEADER])
        return buf.getvalue()

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return str(v)
            return v

        rows = [{k: clean(v) for k, v in r.as_dict().items()} for r in self.rows]
        payload = {"config": {k: self.config[k] for k in sorted(self.config)}, "rows": rows}
        return json.dumps(payload, indent=1) + "\n"

    def summary(self) -> str:
        lines = []
        for r in self.rows:
            d = r.as_dict()
            lines.append(f"{r.verdict.upper():5s} {d['statistic']}: estimate={r.estimate:.6g} "
                         f"oracle={r.oracle:.6g} z={r.z_score:.3g}")
        return "\n".join(lines)

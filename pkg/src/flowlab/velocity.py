"""Driving white noise extracted from realized flows.

The reference family is the circle flow ``dX = sin(X) dW1 + cos(X) dW2``
(Brownian one-point motion, ``A = f''/2``, ``C(f, g)(x, y) = f'(x) g'(y)
cos(x - y)``).  Its driving increments are stored, so the extracted noise
can be compared against the exact projection ``f'(x)(sin x W1 + cos x W2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .coalescing import crossing
from .stats import mc_mean_ci

Profile = Callable[[np.ndarray], np.ndarray]


class LevelError(ValueError):
    """Raised for intervals or levels that do not fit the realization grid."""


@dataclass(frozen=True)
class TestFunction:
    """A test function with its derivatives and generator image."""

    __test__ = False  # not a pytest class

    f: Profile
    df: Profile
    Af: Profile
    name: str = "f"
    d2f: Profile | None = None


def circle_function(kind: str, k: int = 1) -> TestFunction:
    """``sin(kx)`` or ``cos(kx)`` with ``A = f''/2``."""
    if k < 0 or k > 4:
        raise ValueError("frequency must be in 0..4")
    if kind == "sin":
        return TestFunction(lambda x: np.sin(k * x), lambda x: k * np.cos(k * x),
                            lambda x: -0.5 * k * k * np.sin(k * x), f"sin{k}x",
                            lambda x: -k * k * np.sin(k * x))
    if kind == "cos":
        return TestFunction(lambda x: np.cos(k * x), lambda x: -k * np.sin(k * x),
                            lambda x: -0.5 * k * k * np.cos(k * x), f"cos{k}x",
                            lambda x: -k * k * np.cos(k * x))
    raise ValueError("kind must be 'sin' or 'cos'")


def constant_function(c: float = 1.0) -> TestFunction:
    zero = lambda x: np.zeros_like(np.asarray(x, dtype=float))  # noqa: E731
    return TestFunction(lambda x: np.full_like(np.asarray(x, dtype=float), c), zero, zero,
                        "const", zero)


def bump_function(center: float = 0.0, width: float = 1.0) -> TestFunction:
    """Cubic B-spline supported on ``center +- 2 width`` with ``A = f''/2``."""

    def parts(x):
        u = (np.asarray(x, dtype=float) - center) / width
        a = np.abs(u)
        s = np.sign(u)
        inner = a < 1
        outer = (a >= 1) & (a < 2)
        f = np.where(inner, 2 / 3 - a**2 + a**3 / 2, np.where(outer, (2 - a) ** 3 / 6, 0.0))
        d = np.where(inner, -2 * a + 1.5 * a**2, np.where(outer, -0.5 * (2 - a) ** 2, 0.0)) * s
        d2 = np.where(inner, -2 + 3 * a, np.where(outer, 2 - a, 0.0))
        return f, d / width, d2 / width**2

    return TestFunction(lambda x: parts(x)[0], lambda x: parts(x)[1],
                        lambda x: 0.5 * parts(x)[2], "bump", lambda x: parts(x)[2])


# ---------------------------------------------------------------------------
# circle flow


def milstein_step(x: np.ndarray, d1: np.ndarray, d2: np.ndarray) -> np.ndarray:
    """One Milstein step of ``dX = sin X dW1 + cos X dW2``.

    With ``xi = sin x d1 + cos x d2`` and ``eta = cos x d1 - sin x d2`` the
    scheme is ``x + xi + xi eta / 2``.  No Stratonovich drift correction is
    needed because ``sin sin' + cos cos' = 0``.
    """
    s, c = np.sin(x), np.cos(x)
    xi = s * d1 + c * d2
    eta = c * d1 - s * d2
    return x + xi + 0.5 * xi * eta


def circle_covariance(f: TestFunction, g: TestFunction, x, y):
    """``C(f, g)(x, y) = f'(x) g'(y) cos(x - y)``."""
    return f.df(x) * g.df(y) * np.cos(np.asarray(x) - np.asarray(y))


@dataclass(frozen=True, eq=False)
class CircleBatch:
    """Stored driving increments ``dW`` of shape ``(R, 2^level, 2)`` on ``[0, t]``."""

    dW: np.ndarray
    t: float

    @property
    def level(self) -> int:
        return int(round(math.log2(self.dW.shape[1])))

    @property
    def step(self) -> float:
        return self.t / self.dW.shape[1]

    @property
    def replicas(self) -> int:
        return self.dW.shape[0]

    @classmethod
    def sample(cls, t: float, level: int, size: int, rng: np.random.Generator) -> "CircleBatch":
        n = 1 << level
        dW = rng.standard_normal((size, n, 2)) * math.sqrt(t / n)
        dW.setflags(write=False)
        return cls(dW, t)

    def coarsen(self, level: int) -> "CircleBatch":
        """The same driver seen on the coarser grid of ``2^level`` cells."""
        if not 0 <= level <= self.level:
            raise LevelError(f"cannot coarsen level {self.level} to {level}")
        cells, _ = self._cells(level)
        return CircleBatch(cells.sum(axis=2), self.t)

    def path(self, x: float, i: int = 0, j: int | None = None) -> np.ndarray:
        """Flow path from ``x`` at node ``i`` to node ``j``: shape ``(R, j - i + 1)``."""
        j = self.dW.shape[1] if j is None else j
        out = np.empty((self.replicas, j - i + 1))
        out[:, 0] = x
        for k in range(i, j):
            out[:, k - i + 1] = milstein_step(out[:, k - i], self.dW[:, k, 0], self.dW[:, k, 1])
        return out

    def _cells(self, n: int):
        if n > self.level or n < 0:
            raise LevelError(f"level {n} exceeds realization depth {self.level}")
        w = 1 << (self.level - n)
        return self.dW.reshape(self.replicas, 1 << n, w, 2), w

    def increments(self, f: TestFunction, x: float, n: int) -> np.ndarray:
        """Martingale increments of every level-``n`` cell, each started at ``x``.

        ``M = f(X_end) - f(x) - trapezoid integral of Af along the cell``.
        Returns shape ``(R, 2^n)``.
        """
        cells, w = self._cells(n)
        h = self.step
        X = np.full(cells.shape[:2], float(x))
        a_prev = f.Af(X)
        integral = np.zeros_like(X)
        for k in range(w):
            X = milstein_step(X, cells[:, :, k, 0], cells[:, :, k, 1])
            a_new = f.Af(X)
            integral += 0.5 * h * (a_prev + a_new)
            a_prev = a_new
        return f.f(X) - f.f(np.asarray(float(x))) - integral

    def martingale_increment(self, f: TestFunction, x: float, i: int, j: int) -> np.ndarray:
        """``K_{s,t} f(x) - f(x) - int_s^t K_{s,u} Af(x) du`` between nodes ``i`` and ``j``."""
        if not 0 <= i < j <= self.dW.shape[1]:
            raise LevelError("interval is not aligned to the realization grid")
        p = self.path(x, i, j)
        a = f.Af(p)
        integral = self.step * (0.5 * a[:, 0] + a[:, 1:-1].sum(axis=1) + 0.5 * a[:, -1])
        return f.f(p[:, -1]) - f.f(np.asarray(float(x))) - integral

    def noise_sum(self, f: TestFunction, x: float, n: int) -> np.ndarray:
        """``W^n f(x)``: sum of the level-``n`` martingale increments."""
        return self.increments(f, x, n).sum(axis=1)

    def ground_truth(self, f: TestFunction, x: float) -> np.ndarray:
        """``f'(x) (sin x W1 + cos x W2)`` from the stored driver."""
        W = self.dW.sum(axis=1)
        return f.df(np.asarray(x)) * (math.sin(x) * W[:, 0] + math.cos(x) * W[:, 1])

    def sde_residual_samples(self, f: TestFunction, x: float) -> np.ndarray:
        """Pathwise residual of the SDE over the whole window at the finest level.

        ``f(X_t) - f(x) - sum_k f'(X_k)(sin X_k dW1_k + cos X_k dW2_k) - int Af``
        with left-point stochastic sums and trapezoid time integral.
        """
        p = self.path(x)
        Xk = p[:, :-1]
        stoch = np.sum(f.df(Xk) * (np.sin(Xk) * self.dW[:, :, 0] + np.cos(Xk) * self.dW[:, :, 1]),
                       axis=1)
        a = f.Af(p)
        integral = self.step * (0.5 * a[:, 0] + a[:, 1:-1].sum(axis=1) + 0.5 * a[:, -1])
        return f.f(p[:, -1]) - f.f(np.asarray(float(x))) - stoch - integral

    def quadratic_variation(self, x: float) -> np.ndarray:
        p = self.path(x)
        return np.sum(np.diff(p, axis=1) ** 2, axis=1)


def circle_batches(t: float, level: int, replicas: int, seed: int, fn, threads: int = 1,
                   key: Sequence[int | str] = ("circle",), chunk: int = 500):
    """Apply ``fn(batch)`` to each replica chunk of stored circle drivers."""

    def job(g, size, _):
        return fn(CircleBatch.sample(t, level, size, g))

    return rngmod.run_chunks(job, replicas, seed, (*key, level), threads, chunk)


def dyadic_noise_sum(batch: CircleBatch, f: TestFunction, x: float, n: int) -> np.ndarray:
    return batch.noise_sum(f, x, n)


def cauchy_defect(batch: CircleBatch, f: TestFunction, x: float, n: int, m: int) -> tuple[float, float]:
    """Estimate ``E[(W^n f(x) - W^m f(x))^2]`` with its standard error."""
    if m < n:
        raise LevelError("need m >= n")
    if n == m:
        return 0.0, 0.0
    d = batch.noise_sum(f, x, n) - batch.noise_sum(f, x, m)
    return mc_mean_ci(d * d)


def sde_residual(batch: CircleBatch, f: TestFunction, x: float) -> tuple[float, float]:
    r = batch.sde_residual_samples(f, x)
    return mc_mean_ci(r * r)


# ---------------------------------------------------------------------------
# Arratia: extracted noise does not converge


def arratia_noise_pair(f: TestFunction, x: float, t: float, level: int, n: int, m: int,
                       size: int, rng: np.random.Generator, bridge: bool = True):
    """``(W^n f(x), W^m f(x))`` for Arratia flows sampled on a grid of ``2^level`` steps.

    One particle per level is restarted at ``x`` at each of its cell starts.
    Both particles are points of the same coalescing flow: they move
    independently while apart and stick once their paths cross.
    """
    if not 0 <= n < m <= level:
        raise LevelError("need 0 <= n < m <= level")
    N = 1 << level
    h = t / N
    sq = math.sqrt(h)
    wn, wm = 1 << (level - n), 1 << (level - m)
    pn = np.full(size, float(x))
    pm = np.full(size, float(x))
    stuck = np.ones(size, dtype=bool)
    Wn = np.zeros(size)
    Wm = np.zeros(size)
    an = np.zeros(size)
    am = np.zeros(size)
    fx = float(f.f(np.asarray(float(x))))
    for k in range(N):
        if k % wm == 0:
            if k:
                Wm += f.f(pm) - fx - am
            pm[:] = x
            am[:] = 0.0
            if k % wn == 0:
                if k:
                    Wn += f.f(pn) - fx - an
                pn[:] = x
                an[:] = 0.0
                stuck[:] = True
            else:
                stuck = pn == pm
        z = rng.standard_normal((2, size))
        u = rng.random(size) if bridge else None
        lo_n = pn <= pm
        a0 = np.where(lo_n, pm - pn, pn - pm)
        nn = pn + sq * z[0]
        nm = np.where(stuck, nn, pm + sq * z[1])
        a1 = np.where(lo_n, nm - nn, nn - nm)
        hit, _ = crossing(a0, a1, h, u)
        hit &= ~stuck
        mid = 0.5 * (nn + nm)
        nn = np.where(hit, mid, nn)
        nm = np.where(hit, mid, nm)
        stuck |= hit
        an += 0.5 * h * (f.Af(pn) + f.Af(nn))
        am += 0.5 * h * (f.Af(pm) + f.Af(nm))
        pn, pm = nn, nm
    Wn += f.f(pn) - fx - an
    Wm += f.f(pm) - fx - am
    return Wn, Wm


def arratia_cauchy_defect(f: TestFunction, x: float, t: float, level: int, n: int, m: int,
                          replicas: int, seed: int, threads: int = 1) -> tuple[float, float]:
    def job(g, size, _):
        a, b = arratia_noise_pair(f, x, t, level, n, m, size, g)
        return (a - b) ** 2

    return mc_mean_ci(np.concatenate(
        rngmod.run_chunks(job, replicas, seed, ("arratia-noise", level, n, m), threads)))


# ---------------------------------------------------------------------------
# Krylov-Veretennikov expansion


class ChaosOrderError(ValueError):
    """Raised when the requested chaos order exceeds the cost guard."""


def _fourier(kind: str, k: int, K: int) -> np.ndarray:
    c = np.zeros(2 * K + 1, dtype=complex)
    if kind == "sin":
        c[K + k] += 1 / (2j)
        c[K - k] -= 1 / (2j)
    else:
        c[K + k] += 0.5
        c[K - k] += 0.5
    return c


def _vector_field(g: np.ndarray, modes: np.ndarray, which: int) -> np.ndarray:
    """Fourier coefficients of ``sin * g'`` (which=1) or ``cos * g'`` (which=2)."""
    dg = g * (1j * modes)
    up = np.zeros_like(dg)
    dn = np.zeros_like(dg)
    up[:, 1:] = dg[:, :-1]
    dn[:, :-1] = dg[:, 1:]
    if which == 1:
        return (up - dn) / 2j
    return (up + dn) / 2


def kv_terms(batch: CircleBatch, kind: str, k: int, x: float, N: int,
             cutoff: int = 64) -> np.ndarray:
    """Chaos terms ``J^0 f(x), ..., J^N f(x)`` per replica, shape ``(N + 1, R)``.

    The iterated integrals are the nested left-point sums
    ``sum_{k1 < ... < kn} P_{t_k1} D_k1 P_h ... D_kn P_{t - t_kn} f`` with
    ``D_j = dW1_j sin d/dx + dW2_j cos d/dx``, evaluated backward in time on
    Fourier coefficients.  The heat semigroup is exact on each mode.  Only
    modes up to ``min(cutoff, k + N)`` are stored: the vector fields raise
    the frequency by at most one per order, so higher modes stay zero.
    """
    if N > 6:
        raise ChaosOrderError("chaos order above 6 is refused (cost guard)")
    if cutoff < 64:
        raise ValueError("cutoff frequency must be at least 64")
    K = min(cutoff, k + N + 1)
    modes = np.arange(-K, K + 1)
    heat = np.exp(-0.5 * modes.astype(float) ** 2 * batch.step)
    R = batch.replicas
    F = [np.zeros((R, 2 * K + 1), dtype=complex) for _ in range(N + 1)]
    F[0][:] = _fourier(kind, k, K)
    dW = batch.dW
    for j in range(dW.shape[1] - 1, -1, -1):
        P = [fm * heat for fm in F]
        d1 = dW[:, j, 0][:, None]
        d2 = dW[:, j, 1][:, None]
        new = [P[0]]
        for m in range(1, N + 1):
            g = P[m - 1]
            new.append(P[m] + d1 * _vector_field(g, modes, 1) + d2 * _vector_field(g, modes, 2))
        F = new
    phase = np.exp(1j * modes * x)
    return np.stack([(fm * phase).sum(axis=1).real for fm in F])


@dataclass(frozen=True)
class KvResult:
    """Squared gaps per chaos order, with paired differences between orders."""

    gaps: np.ndarray
    stderr: np.ndarray
    samples: np.ndarray


def kv_truncate(x: float, t: float, kind: str, k: int, N: int, level: int, replicas: int,
                seed: int, threads: int = 1, cutoff: int = 64) -> KvResult:
    """``E[(f(phi_t(x)) - sum_{n <= N} J^n f(x))^2]`` for every truncation order.

    The flow and the chaos terms use the same stored driver.
    """
    f = circle_function(kind, k)

    def fn(b):
        terms = kv_terms(b, kind, k, x, N, cutoff)
        fx = f.f(b.path(x)[:, -1])
        partial = np.cumsum(terms, axis=0)
        return (fx[None, :] - partial) ** 2

    samples = np.concatenate(circle_batches(t, level, replicas, seed, fn, threads, ("kv",)), axis=1)
    stats = [mc_mean_ci(s) for s in samples]
    return KvResult(np.array([a for a, _ in stats]), np.array([b for _, b in stats]), samples)


def kv_gap0_closed_form(kind: str, k: int, x: float, t: float) -> float:
    """``E[(f(x + B_t) - P_t f(x))^2]`` for ``f = sin(kx)`` or ``cos(kx)``."""
    e1 = math.exp(-0.5 * k * k * t)
    e4 = math.exp(-2 * k * k * t)
    c2 = math.cos(2 * k * x)
    if kind == "sin":
        second = 0.5 * (1 - c2 * e4)
        first = e1 * math.sin(k * x)
    else:
        second = 0.5 * (1 + c2 * e4)
        first = e1 * math.cos(k * x)
    return second - first * first

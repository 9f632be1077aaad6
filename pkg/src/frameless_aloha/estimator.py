"""Maximum-likelihood estimation of the user population from slot classes.

A slot accessed with probability ``p`` by ``c`` contending users is idle,
a singleton or a collision with binomial probabilities. The population
size ``n`` enters through ``c = n - r``, where ``r`` is the number of users
resolved before the round the slot belongs to. ``n`` is treated as a
continuous variable and the estimate is the root of the summed score
(derivative of the log-likelihood) in ``n``.

Numerics. With ``q = 1 - p``, ``L = log(q)`` and ``m = c - 1`` the collision
mass is ``1 - q**m * (1 + m*p)``. Writing ``g(x) = log1p(x) - x`` its log
complement is ``b = m*g(-p) + g(m*p)``; both terms are non-positive for
``m > 0`` so ``b`` carries no cancellation and the mass is ``-expm1(b)``.
The collision score ``-q**m * (p + L*(q + c*p)) / mass`` has the same
cancellation problem in its numerator for small ``c*p``; since
``p + L*(q + c*p) = g(-p) + L*p*m`` it is evaluated as a sum of two
same-signed terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np
from scipy.optimize import brentq

from .channel import SlotClass

__all__ = [
    "EstimateBounds",
    "MleResult",
    "Observation",
    "ObservationLog",
    "RootFindingError",
    "grid_argmax_oracle",
    "log1pmx",
    "mle_estimate",
    "score_term",
    "slot_log_pmf",
    "total_log_likelihood",
    "total_score",
]

MAX_ITER = 200
XTOL = 1e-3
# smallest contender count that makes a collision possible under the relaxation
_COLLISION_MARGIN = 1e-9

# Taylor coefficients of log1p(x) - x: sum_{k>=2} (-1)^(k+1) x^k / k
_SERIES_CUT = 0.01
_SERIES_COEF = np.array([(-1.0) ** (k + 1) / k for k in range(2, 11)])[::-1]


def log1pmx(x):
    """``log(1 + x) - x`` without cancellation for small ``|x|``."""
    arr = np.asarray(x, dtype=float)
    flat = np.atleast_1d(arr)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log1p(flat) - flat
    small = np.abs(flat) < _SERIES_CUT
    if small.any():
        xs = flat[small]
        acc = np.zeros_like(xs)
        for c in _SERIES_COEF:
            acc = acc * xs + c
        out[small] = acc * xs * xs
    return out if arr.ndim else float(out[0])


def _log1mexp(b):
    """``log(1 - exp(b))`` for ``b < 0``."""
    b = np.asarray(b, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(b > -math.log(2.0), np.log(-np.expm1(b)), np.log1p(-np.exp(b)))


class RootFindingError(RuntimeError):
    pass


class Observation(NamedTuple):
    cls: SlotClass
    access_prob: float
    resolved_before: int


def _check_prob(p):
    if not 0.0 < p < 1.0:
        raise ValueError(f"access probability must lie in (0, 1), got {p}")


def _collision_log_pmf(p, c):
    p = np.asarray(p, dtype=float)
    c = np.asarray(c, dtype=float)
    m = c - 1.0
    with np.errstate(invalid="ignore"):
        b = m * log1pmx(-p) + log1pmx(m * p)
        out = _log1mexp(b)
    return np.where(c > 1.0, out, -np.inf)


def _collision_score(p, c, gp=None, L=None):
    """Collision score; ``gp = log1pmx(-p)`` and ``L = log1p(-p)`` may be passed precomputed."""
    p = np.asarray(p, dtype=float)
    c = np.asarray(c, dtype=float)
    if gp is None:
        gp = log1pmx(-p)
    if L is None:
        L = np.log1p(-p)
    m = c - 1.0
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        num = -gp - L * p * m
        log_mass = _log1mexp(m * gp + log1pmx(m * p))
        out = np.exp(m * L + np.log(num) - log_mass)
    return np.where(c > 1.0, out, np.inf)


def slot_log_pmf(cls: SlotClass, p: float, n_contending: float) -> float:
    """Log-probability of observing ``cls`` with ``n_contending`` users at access probability ``p``.

    Impossible observations (a collision with at most one contender) give ``-inf``.
    """
    _check_prob(p)
    c = float(n_contending)
    if not c > 0:
        raise ValueError(f"contender count must be positive, got {n_contending}")
    L = math.log1p(-p)
    if cls == SlotClass.IDLE:
        return c * L
    if cls == SlotClass.SINGLETON:
        return math.log(c) + math.log(p) + (c - 1.0) * L
    return float(_collision_log_pmf(p, c))


def score_term(cls: SlotClass, p: float, n_contending: float) -> float:
    """Derivative of :func:`slot_log_pmf` in the population size.

    A collision with at most one contender has score ``+inf``: the
    likelihood is zero there and increases with ``n``.
    """
    _check_prob(p)
    c = float(n_contending)
    if not c > 0:
        raise ValueError(f"contender count must be positive, got {n_contending}")
    L = math.log1p(-p)
    if cls == SlotClass.IDLE:
        return L
    if cls == SlotClass.SINGLETON:
        return 1.0 / c + L
    return float(_collision_score(p, c))


class ObservationLog:
    """Append-only record of slot observations with aggregated sufficient statistics.

    Besides the ordered observation list, the log keeps
    * the sum of ``log(1 - p)`` over idle and singleton slots (constant in ``n``),
    * singleton counts per ``resolved_before`` value,
    * collision counts per distinct ``(p, resolved_before)`` pair,
    so that the score costs one vectorised pass over distinct collision
    configurations rather than over all slots.
    """

    def __init__(self, observations: Iterable[Observation] = ()):
        self.observations: list[Observation] = []
        self.n_excluded = 0
        self._const = 0.0
        self._max_resolved = -1
        self._single: dict[int, int] = {}
        self._coll_index: dict[tuple[float, int], int] = {}
        self._coll_p = np.empty(16)
        self._coll_r = np.empty(16)
        self._coll_cnt = np.empty(16)
        self._coll_gp = np.empty(16)
        self._coll_L = np.empty(16)
        self._n_coll = 0
        for obs in observations:
            self.append(obs)

    def __len__(self):
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)

    def append(self, obs: Observation) -> bool:
        """Add an observation; returns False if it was excluded (``p == 1`` carries no usable likelihood)."""
        cls, p, r = SlotClass(obs[0]), float(obs[1]), int(obs[2])
        if p == 1.0:
            self.n_excluded += 1
            return False
        _check_prob(p)
        if r < 0:
            raise ValueError(f"resolved_before must be nonnegative, got {r}")
        self.observations.append(Observation(cls, p, r))
        self._max_resolved = max(self._max_resolved, r)
        if cls != SlotClass.COLLISION:
            self._const += math.log1p(-p)
        if cls == SlotClass.SINGLETON:
            self._single[r] = self._single.get(r, 0) + 1
        elif cls == SlotClass.COLLISION:
            key = (p, r)
            idx = self._coll_index.get(key)
            if idx is None:
                idx = self._n_coll
                if idx == self._coll_p.size:
                    self._coll_p = np.resize(self._coll_p, 2 * idx)
                    self._coll_r = np.resize(self._coll_r, 2 * idx)
                    self._coll_cnt = np.resize(self._coll_cnt, 2 * idx)
                    self._coll_gp = np.resize(self._coll_gp, 2 * idx)
                    self._coll_L = np.resize(self._coll_L, 2 * idx)
                self._coll_index[key] = idx
                self._coll_p[idx] = p
                self._coll_r[idx] = r
                self._coll_cnt[idx] = 0.0
                self._coll_gp[idx] = log1pmx(-p)
                self._coll_L[idx] = math.log1p(-p)
                self._n_coll += 1
            self._coll_cnt[idx] += 1.0
        return True

    @property
    def max_resolved_before(self) -> int:
        return max(self._max_resolved, 0)

    def feasible_lower(self) -> float:
        """Smallest ``n`` at which every observation has positive probability (as an open bound)."""
        # any slot logged after r users were resolved implies n >= r
        lo = float(self._max_resolved) if self.observations else 0.0
        if self._n_coll:
            lo = max(lo, float(self._coll_r[: self._n_coll].max()) + 1.0)
        return lo

    def lower_bound(self, n_lower: float) -> float:
        """``n_lower`` raised to just inside the region where all observations are possible."""
        return max(n_lower, self.feasible_lower() + _COLLISION_MARGIN)

    def score(self, n: float) -> float:
        """Summed score at population size ``n`` using the aggregated statistics."""
        total = self._const
        for r, k in self._single.items():
            total += k / (n - r)
        k = self._n_coll
        if k:
            p, gp, L = self._coll_p[:k], self._coll_gp[:k], self._coll_L[:k]
            m = n - 1.0 - self._coll_r[:k]
            if m.min() <= 0.0:
                return math.inf
            x = m * p
            with np.errstate(under="ignore", over="ignore"):
                g = np.log1p(x) - x
                small = x < _SERIES_CUT
                if small.any():
                    g[small] = log1pmx(x[small])
                # only the ratio q**m / mass is needed, so log(-expm1(b)) loses nothing here
                log_mass = np.log(-np.expm1(m * gp + g))
                terms = np.exp(m * L + np.log(-gp - L * x) - log_mass)
            total += float(np.dot(self._coll_cnt[:k], terms))
        return total


def total_score(log: ObservationLog | Iterable[Observation], n: float) -> float:
    """Sum of per-slot scores, each at ``n_contending = n - resolved_before``."""
    if not isinstance(log, ObservationLog):
        log = ObservationLog(log)
    if len(log) and not n > log.max_resolved_before:
        raise ValueError(f"n={n} must exceed every resolved_before in the log")
    return log.score(n)


def total_log_likelihood(log: Iterable[Observation], n: float) -> float:
    return sum(slot_log_pmf(o.cls, o.access_prob, n - o.resolved_before) for o in log)


@dataclass(frozen=True)
class EstimateBounds:
    n_lower: float
    n_upper: float

    def __post_init__(self):
        if not self.n_lower < self.n_upper:
            raise ValueError(f"need n_lower < n_upper, got {self.n_lower} >= {self.n_upper}")


@dataclass(frozen=True)
class MleResult:
    value: float
    saturated: str | None = None  # None, "low" or "high"
    evaluations: int = 0

    def __float__(self):
        return self.value


def mle_estimate(
    log: ObservationLog,
    bounds: EstimateBounds,
    hint: float | None = None,
    xtol: float = XTOL,
) -> MleResult:
    """Root of the summed score on ``[n_lower, n_upper]``.

    The lower bound is raised, if needed, to just above the point where a
    logged observation becomes impossible. When the score keeps one sign on
    the whole interval the corresponding bound is returned and flagged as
    saturated. ``hint`` (typically the previous estimate) narrows the
    initial bracket; it never changes the root found, only the work spent.
    """
    if not isinstance(log, ObservationLog):
        log = ObservationLog(log)
    if len(log) == 0:
        raise ValueError("cannot estimate from an empty log")
    lo = log.lower_bound(bounds.n_lower)
    hi = bounds.n_upper
    if not lo < hi:
        return MleResult(hi, "high", 0)

    evals = 0

    def f(n):
        nonlocal evals
        evals += 1
        return log.score(n)

    if hint is not None and lo < hint < hi:
        width = max(1.0, 1e-3 * hint)
        a, b = max(lo, hint - width), min(hi, hint + width)
    else:
        a, b = lo, hi
    fa, fb = f(a), f(b)
    # the score decreases in n: walk outwards until the bracket straddles the root
    while fa < 0 and a > lo:
        b, fb = a, fa
        width *= 4
        a = max(lo, hint - width)
        fa = f(a)
    while fb > 0 and b < hi:
        a, fa = b, fb
        width *= 4
        b = min(hi, hint + width)
        fb = f(b)
    if fa == 0:
        return MleResult(a, None, evals)
    if fb == 0:
        return MleResult(b, None, evals)
    if fa < 0:
        return MleResult(lo, "low", evals)
    if fb > 0:
        return MleResult(hi, "high", evals)
    if math.isinf(fa):
        # the score is +inf only on the infeasible side; nudge inside
        a = math.nextafter(a, b)
        while math.isinf(f(a)):
            a = a + 1e-6 * max(1.0, a)
    try:
        root, info = brentq(f, a, b, xtol=xtol, maxiter=MAX_ITER, full_output=True)
    except RuntimeError as exc:
        raise RootFindingError(str(exc)) from exc
    if not info.converged:
        raise RootFindingError(f"root finder did not converge: {info.flag}")
    return MleResult(float(root), None, evals)


def grid_argmax_oracle(log: Iterable[Observation], n_lo: int, n_hi: int) -> int:
    """Integer ``n`` in ``[n_lo, n_hi]`` maximising the summed log-likelihood, by exhaustive search."""
    if not n_lo < n_hi:
        raise ValueError("need n_lo < n_hi")
    obs = list(log)
    if not obs:
        return n_lo
    best_n, best_ll = n_lo, -math.inf
    for n in range(n_lo, n_hi + 1):
        ll = 0.0
        for o in obs:
            c = n - o.resolved_before
            if c == 0 and o.cls == SlotClass.IDLE:
                continue
            if c <= 0:
                ll = -math.inf
                break
            ll += slot_log_pmf(o.cls, o.access_prob, c)
        if ll > best_ll:
            best_n, best_ll = n, ll
    return best_n

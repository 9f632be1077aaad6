"""Independent reference computations shared by the unit and acceptance tests."""

import math

import mpmath
import numpy as np

from frameless_aloha.channel import SlotClass
from frameless_aloha.estimator import EstimateBounds, Observation, ObservationLog, grid_argmax_oracle, mle_estimate

P_GRID = (1e-4, 1e-3, 1e-2, 0.1, 0.5, 0.9)
N_GRID = (2, 3, 10, 100, 1000, 10_000)
CLASSES = (SlotClass.IDLE, SlotClass.SINGLETON, SlotClass.COLLISION)


def _digits(p, c):
    # enough digits that 1 - idle - single keeps full precision
    return 40 + int(c * -math.log10(1 - p)) + int(math.log10(c) + 1)


def _mp_log_pmf(cls, p, c):
    # at the caller's working precision
    p, c = mpmath.mpf(p), mpmath.mpf(c)
    q = 1 - p
    idle = q**c
    single = c * p * q ** (c - 1)
    val = {SlotClass.IDLE: idle, SlotClass.SINGLETON: single, SlotClass.COLLISION: 1 - idle - single}[cls]
    return mpmath.log(val)


def exact_log_pmf(cls, p, c):
    """Slot log-pmf in arbitrary precision, straight from the binomial formulas."""
    with mpmath.workdps(_digits(p, c)):
        return _mp_log_pmf(cls, p, c)


def exact_score(cls, p, c):
    with mpmath.workdps(_digits(p, c + 1)):
        return mpmath.diff(lambda x: _mp_log_pmf(cls, p, x), mpmath.mpf(c))


def fd_step(p, c):
    """Step small against both the scale of ``c`` and the decay length ``1/|log(1-p)|``."""
    return min(1e-3 * c, 1e-2 / -math.log1p(-p))


def central_difference(f, x, h):
    """Five-point stencil derivative, truncation error O(h**4)."""
    return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)


def fixed_point_oracle(slots, cap=10):
    """Rescan every slot until no exploitable slot holds exactly one unresolved user."""
    resolved = set()
    changed = True
    while changed:
        changed = False
        for users in slots:
            users = set(users)
            if len(users) > cap:
                continue
            left = users - resolved
            if len(left) == 1:
                resolved |= left
                changed = True
    return resolved


def random_graph(rng, max_users=6, max_slots=8):
    n = int(rng.integers(1, max_users + 1))
    k = int(rng.integers(1, max_slots + 1))
    slots = [set(np.flatnonzero(rng.random(n) < rng.random()).tolist()) for _ in range(k)]
    return n, slots


def synthetic_log(rng, n_true, n_slots, p_lo=1e-3, p_hi=0.5, resolved_steps=(0,)):
    """Slot classes drawn from the exact binomial law; ``p`` log-uniform over ``[p_lo, p_hi]``."""
    obs = []
    for j in range(n_slots):
        r = resolved_steps[min(j * len(resolved_steps) // n_slots, len(resolved_steps) - 1)]
        p = float(math.exp(rng.uniform(math.log(p_lo), math.log(p_hi))))
        k = int(rng.binomial(n_true - r, p))
        obs.append(Observation(SlotClass(min(k, 2)), p, r))
    return obs


def check_oracle_agreement(seed, n_lo=1, n_hi=600):
    """round(mle) vs exhaustive argmax on one synthetic log; returns (mle, grid)."""
    rng = np.random.default_rng(seed)
    n_true = int(rng.integers(5, 200))
    steps = (0,) if rng.random() < 0.5 else (0, int(rng.integers(0, n_true)))
    # p spans three decades
    obs = synthetic_log(rng, n_true, int(rng.integers(10, 40)), p_lo=5e-4, resolved_steps=steps)
    log = ObservationLog(obs)
    lo = max(n_lo, math.ceil(log.feasible_lower() + 1e-9))
    res = mle_estimate(log, EstimateBounds(lo, n_hi))
    return res.value, grid_argmax_oracle(obs, lo, n_hi)

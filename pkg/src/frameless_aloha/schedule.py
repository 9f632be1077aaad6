"""Slot access probabilities for the initial and the subsequent rounds."""

from __future__ import annotations

from dataclasses import dataclass

DEFAULT_P0 = 0.047
DEFAULT_ALPHA = 1.02
DEFAULT_BETA = 2.9
DEFAULT_N_MIN = 100
DEFAULT_COLLISION_PROB = 0.95
DEFAULT_MAX_PROB = 0.75


class InfeasibleScheduleError(ValueError):
    """No initial access probability below 1 reaches the requested collision probability."""


@dataclass(frozen=True)
class ScheduleParams:
    p0: float = DEFAULT_P0
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    n_min: int = DEFAULT_N_MIN
    target_collision_prob: float = DEFAULT_COLLISION_PROB
    max_prob: float = DEFAULT_MAX_PROB

    def __post_init__(self):
        if not 0.0 < self.p0 <= 1.0:
            raise ValueError(f"p0 must lie in (0, 1], got {self.p0}")
        if not self.alpha > 1.0:
            raise ValueError(f"alpha must be > 1, got {self.alpha}")
        if not self.beta > 0.0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.n_min < 1:
            raise ValueError(f"n_min must be >= 1, got {self.n_min}")
        if not 0.0 < self.target_collision_prob < 1.0:
            raise ValueError(
                f"target_collision_prob must lie in (0, 1), got {self.target_collision_prob}"
            )
        if not 0.0 < self.max_prob <= 1.0:
            raise ValueError(f"max_prob must lie in (0, 1], got {self.max_prob}")


def initial_round_prob(j: int, params: ScheduleParams) -> float:
    """Access probability of slot ``j`` (1-based) of the initial round, ``p0 / alpha**j``."""
    if j < 1:
        raise ValueError(f"slot index must be >= 1, got {j}")
    return params.p0 / params.alpha**j


def subsequent_round_prob(n_hat_contending: float, params: ScheduleParams) -> float:
    """Constant access probability for a resolution round.

    Targets an expected slot degree of ``beta`` among the estimated
    contenders, clamped to 1 when fewer than ``beta`` users are expected.
    """
    if not n_hat_contending > 0:
        raise ValueError(f"estimated contenders must be positive, got {n_hat_contending}")
    return min(params.max_prob, params.beta / n_hat_contending)


def collision_prob(p0: float, n_min: int) -> float:
    """Probability that a slot accessed with ``p0`` by ``n_min`` users is a collision."""
    q = 1.0 - p0
    return 1.0 - q**n_min - n_min * p0 * q ** (n_min - 1)


def collision_floor_p0(n_min: int, target_collision_prob: float, tol: float = 1e-6) -> float:
    """Smallest ``p0`` whose first slot collides with probability at least the target.

    Bisection on (0, 1); the collision probability is increasing in ``p0``
    for a fixed population. The returned value satisfies the inequality and
    ``result - tol`` does not.
    """
    if n_min < 2:
        raise InfeasibleScheduleError(f"a collision needs at least two users, got n_min={n_min}")
    if not 0.0 < target_collision_prob < 1.0:
        raise ValueError(f"target_collision_prob must lie in (0, 1), got {target_collision_prob}")

    lo, hi = 0.0, 1.0
    # collision_prob(1, n) == 1 for n >= 2, so the bracket is always valid
    while hi - lo > tol / 4:
        mid = 0.5 * (lo + hi)
        if collision_prob(mid, n_min) >= target_collision_prob:
            hi = mid
        else:
            lo = mid
    if hi >= 1.0:
        raise InfeasibleScheduleError(
            f"no p0 < 1 reaches collision probability {target_collision_prob} for n_min={n_min}"
        )
    return hi

"""Slot-level channel model: independent per-user access, perfect class observation.

Random draws come from numpy's PCG64 generator (128-bit state) seeded
through ``numpy.random.SeedSequence``, so a seed fully determines the
sequence of slot records.

Each contending user transmits independently with probability ``p``. The
transmitters are drawn by geometric skipping over the ascending list of
contending users: gaps between consecutive transmitters are i.i.d.
``Geometric(p)``, which gives exactly the same joint law as one Bernoulli
draw per user while costing O(number of transmitters) per slot.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class SlotClass(enum.IntEnum):
    IDLE = 0
    SINGLETON = 1
    COLLISION = 2


def classify(degree: int) -> SlotClass:
    if degree < 0:
        raise ValueError(f"slot degree must be nonnegative, got {degree}")
    if degree == 0:
        return SlotClass.IDLE
    if degree == 1:
        return SlotClass.SINGLETON
    return SlotClass.COLLISION


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic stream for one simulation repeat."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


@dataclass(frozen=True)
class SlotRecord:
    round_index: int
    slot_index: int
    access_prob: float
    contributors: tuple[int, ...]
    observation: SlotClass

    def __post_init__(self):
        if classify(len(self.contributors)) is not self.observation:
            raise ValueError(
                f"observation {self.observation.name} inconsistent with "
                f"{len(self.contributors)} contributors"
            )

    @property
    def degree(self) -> int:
        return len(self.contributors)


class UserPopulation:
    """The true user set and the users the base station has acknowledged.

    Acknowledged users stop contending. Acknowledgements are sent in the
    beacon at a round boundary, so the contending set is fixed for the
    duration of a round even when SIC decodes users mid-round.
    """

    def __init__(self, n_total: int):
        if n_total < 0:
            raise ValueError(f"population size must be nonnegative, got {n_total}")
        self.n_total = n_total
        self.resolved = np.zeros(n_total, dtype=bool)
        self._contending = np.arange(n_total, dtype=np.int64)

    @property
    def n_resolved(self) -> int:
        return int(self.resolved.sum())

    @property
    def contending(self) -> np.ndarray:
        """Ids of users that have not been acknowledged, ascending."""
        return self._contending

    def acknowledge(self, user_ids) -> None:
        ids = np.asarray(list(user_ids), dtype=np.int64)
        if ids.size == 0:
            return
        if ids.min() < 0 or ids.max() >= self.n_total:
            raise ValueError("acknowledged user id out of range")
        self.resolved[ids] = True
        self._contending = np.flatnonzero(~self.resolved)


def _bernoulli_positions(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Indices in ``range(n)`` selected by independent Bernoulli(p) trials, ascending."""
    batch = int(n * p + 4.0 * math.sqrt(n * p) + 8)
    pos = np.cumsum(rng.geometric(p, size=batch)) - 1
    while pos[-1] < n:
        more = np.cumsum(rng.geometric(p, size=batch)) + pos[-1]
        pos = np.concatenate([pos, more])
    return pos[: np.searchsorted(pos, n)]


def simulate_slot(
    population: UserPopulation,
    p: float,
    rng: np.random.Generator,
    round_index: int = 1,
    slot_index: int = 1,
) -> SlotRecord:
    """Draw one slot: every contending user transmits independently with probability ``p``."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"access probability must lie in (0, 1], got {p}")
    contending = population.contending
    n = contending.size
    if n == 0:
        contributors = ()
    elif p == 1.0:
        contributors = tuple(contending.tolist())
    else:
        positions = _bernoulli_positions(n, p, rng)
        contributors = tuple(contending[positions].tolist())
    return SlotRecord(
        round_index=round_index,
        slot_index=slot_index,
        access_prob=p,
        contributors=contributors,
        observation=classify(len(contributors)),
    )

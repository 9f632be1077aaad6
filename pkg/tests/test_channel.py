import math

import numpy as np
import pytest
from scipy import stats

from frameless_aloha.channel import (
    SlotClass,
    SlotRecord,
    UserPopulation,
    classify,
    make_rng,
    simulate_slot,
)


@pytest.mark.parametrize(
    "degree, expected",
    [(0, SlotClass.IDLE), (1, SlotClass.SINGLETON), (2, SlotClass.COLLISION), (7, SlotClass.COLLISION)],
)
def test_classify(degree, expected):
    assert classify(degree) is expected


def test_classify_rejects_negative():
    with pytest.raises(ValueError):
        classify(-1)


def test_slot_record_checks_class():
    with pytest.raises(ValueError):
        SlotRecord(1, 1, 0.5, (3,), SlotClass.IDLE)


def test_no_contenders_gives_idle():
    pop = UserPopulation(4)
    pop.acknowledge(range(4))
    rec = simulate_slot(pop, 0.7, make_rng(1))
    assert rec.observation is SlotClass.IDLE
    assert rec.contributors == ()


def test_certain_transmission():
    pop = UserPopulation(3)
    rec = simulate_slot(pop, 1.0, make_rng(1))
    assert rec.observation is SlotClass.COLLISION
    assert rec.contributors == (0, 1, 2)


def test_acknowledged_users_never_transmit():
    pop = UserPopulation(10)
    pop.acknowledge([1, 4, 7])
    rng = make_rng(3)
    for _ in range(200):
        rec = simulate_slot(pop, 0.9, rng)
        assert not {1, 4, 7} & set(rec.contributors)
        assert set(rec.contributors) <= set(pop.contending.tolist())


def test_two_users_half_probability_frequencies():
    pop = UserPopulation(2)
    rng = make_rng(2024)
    n = 100_000
    counts = np.zeros(3)
    for _ in range(n):
        counts[simulate_slot(pop, 0.5, rng).observation] += 1
    expected = np.array([0.25, 0.5, 0.25])
    se = np.sqrt(expected * (1 - expected) / n)
    assert np.all(np.abs(counts / n - expected) < 3 * se)


@pytest.mark.parametrize("n_c, p", [(5, 0.3), (40, 0.05), (200, 0.01)])
def test_slot_classes_follow_binomial_pmf(n_c, p):
    pop = UserPopulation(n_c)
    rng = make_rng(n_c)
    reps = 20_000
    counts = np.zeros(3)
    for _ in range(reps):
        counts[simulate_slot(pop, p, rng).observation] += 1
    q = 1 - p
    probs = np.array([q**n_c, n_c * p * q ** (n_c - 1), 0.0])
    probs[2] = 1 - probs[0] - probs[1]
    _, pvalue = stats.chisquare(counts, reps * probs)
    assert pvalue > 0.01


def test_same_seed_same_records():
    def draw(seed):
        pop = UserPopulation(50)
        rng = make_rng(seed)
        return [simulate_slot(pop, 0.05, rng, 1, j) for j in range(1, 300)]

    assert draw(11) == draw(11)
    assert draw(11) != draw(12)


def test_population_acknowledge_is_monotone():
    pop = UserPopulation(5)
    pop.acknowledge([0, 2])
    pop.acknowledge([2, 3])
    assert pop.n_resolved == 3
    assert pop.contending.tolist() == [1, 4]
    with pytest.raises(ValueError):
        pop.acknowledge([9])


def test_rejects_bad_probability():
    with pytest.raises(ValueError):
        simulate_slot(UserPopulation(3), 0.0, make_rng(0))
    with pytest.raises(ValueError):
        simulate_slot(UserPopulation(3), math.nan, make_rng(0))

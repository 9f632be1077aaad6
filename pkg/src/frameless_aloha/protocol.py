"""Round-by-round protocol: an estimation-focused initial round followed by resolution rounds.

Timing model. The base station acknowledges decoded users only in the
beacon that closes a round, so the set of contending users is frozen for
the whole round. A user decoded mid-round keeps transmitting until the
round ends; SIC removes those later replicas immediately. This is what
makes every slot of round ``i`` follow the binomial model with
``n - N_R(i-1)`` contenders, which the estimator relies on.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

from .channel import SlotRecord, UserPopulation, make_rng, simulate_slot
from .estimator import EstimateBounds, MleResult, Observation, ObservationLog, mle_estimate
from .schedule import ScheduleParams, initial_round_prob, subsequent_round_prob
from .sic import DEFAULT_DEGREE_CAP, ContentionGraph, SicMode

DEFAULT_K_IDLE = 6
DEFAULT_GAMMA = 0.8
DEFAULT_N_MAX = 10_000
DEFAULT_SLOT_CAP_FACTOR = 2.0
MAX_ROUNDS = 50
FINAL_ROUND_PROB = 0.5
MID_ROUND_FRACTION = 0.5
# the estimate is kept strictly above the number of users already decoded
_LOWER_MARGIN = 1e-9


class UpdatePolicy(enum.Enum):
    PER_ROUND = "per-round"
    MID_ROUND = "mid-round"
    PER_SLOT = "per-slot"


class Termination(enum.Enum):
    K_IDLE = "k-idle"
    GAMMA_REACHED = "gamma-reached"
    SLOT_CAP_HIT = "slot-cap-hit"
    FINAL_COMPLETE = "final-complete"


@dataclass(frozen=True)
class ProtocolParams:
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    k_idle: int = DEFAULT_K_IDLE
    gamma: float = DEFAULT_GAMMA
    update_policy: UpdatePolicy = UpdatePolicy.MID_ROUND
    sic_mode: SicMode = SicMode.BACKTRACK
    degree_cap: int = DEFAULT_DEGREE_CAP
    n_max_bound: int = DEFAULT_N_MAX
    round_slot_cap_factor: float = DEFAULT_SLOT_CAP_FACTOR
    max_rounds: int = MAX_ROUNDS

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.k_idle < 1:
            raise ValueError(f"k_idle must be >= 1, got {self.k_idle}")
        if self.round_slot_cap_factor < 1.0:
            raise ValueError(
                f"round_slot_cap_factor must be >= 1, got {self.round_slot_cap_factor}"
            )
        if self.degree_cap < 1:
            raise ValueError(f"degree_cap must be >= 1, got {self.degree_cap}")
        if self.n_max_bound < 1:
            raise ValueError(f"n_max_bound must be >= 1, got {self.n_max_bound}")
        if self.max_rounds < 2:
            raise ValueError(f"max_rounds must be >= 2, got {self.max_rounds}")

    @property
    def n_upper(self) -> float:
        return 4.0 * self.n_max_bound


@dataclass(frozen=True)
class RoundOutcome:
    round_index: int
    slots_used: int
    resolved_in_round: int
    estimate_at_end: float
    termination_reason: Termination
    access_prob: float | None = None  # constant probability of a resolution round
    resolved_total: int = 0
    saturated: str | None = None


@dataclass
class ProtocolTrace:
    true_n: int
    rounds: list[RoundOutcome] = field(default_factory=list)
    total_slots: int = 0
    final_estimate: float = math.nan
    unresolved: int = 0
    safety_cap_hit: bool = False
    slots: list[SlotRecord] | None = None
    initial_estimates: list[float] | None = None

    @property
    def completed(self) -> bool:
        return self.unresolved == 0

    @property
    def estimates_by_round(self) -> list[float]:
        return [r.estimate_at_end for r in self.rounds]


class _Estimator:
    """Keeps the running estimate and warm-starts each refresh from the last one."""

    def __init__(self, log: ObservationLog, graph: ContentionGraph, params: ProtocolParams):
        self.log = log
        self.graph = graph
        self.n_upper = params.n_upper
        self.last: MleResult | None = None

    def refresh(self) -> MleResult:
        if len(self.log) == 0:
            # nothing usable observed yet; keep the previous value
            if self.last is None:
                self.last = MleResult(self.graph.n_resolved + _LOWER_MARGIN, "low")
            return self.last
        lower = self.graph.n_resolved + _LOWER_MARGIN
        hint = self.last.value if self.last is not None else None
        self.last = mle_estimate(self.log, EstimateBounds(lower, self.n_upper), hint=hint)
        return self.last

    def at_most(self, threshold: float) -> bool:
        """Whether a refresh now would return an estimate <= ``threshold``.

        The score decreases in ``n``, so this is a single sign evaluation
        instead of a root search.
        """
        if len(self.log) == 0:
            return self.refresh().value <= threshold
        if threshold < self.log.lower_bound(self.graph.n_resolved + _LOWER_MARGIN):
            return False
        if threshold >= self.n_upper:
            return True
        return self.log.score(threshold) <= 0.0


def check_final_designation(p: float, n_hat: float, n_resolved: int) -> bool:
    """A resolution round closes the protocol when it was run with ``p > 0.5``
    and the estimate agrees with the resolved count to within one user."""
    return p > FINAL_ROUND_PROB and abs(n_hat - n_resolved) < 1.0


def run_initial_round(
    population: UserPopulation,
    params: ProtocolParams,
    rng,
    graph: ContentionGraph,
    log: ObservationLog,
    estimator: _Estimator | None = None,
    slots: list[SlotRecord] | None = None,
    estimates: list[float] | None = None,
) -> RoundOutcome:
    """Geometrically decreasing access probability until ``k_idle`` idle slots in a row.

    The estimate is refreshed after every slot and SIC runs incrementally.
    """
    if population.n_resolved:
        raise ValueError("initial round needs a fresh population")
    estimator = estimator or _Estimator(log, graph, params)
    j = 0
    idle_run = 0
    before = graph.n_resolved
    est = None
    while idle_run < params.k_idle:
        j += 1
        p = initial_round_prob(j, params.schedule)
        record = simulate_slot(population, p, rng, 1, j)
        if slots is not None:
            slots.append(record)
        log.append(Observation(record.observation, p, 0))
        graph.add_slot(record)
        graph.peel()
        est = estimator.refresh()
        if estimates is not None:
            estimates.append(est.value)
        idle_run = idle_run + 1 if record.degree == 0 else 0
    resolved = graph.n_resolved - before
    population.acknowledge(graph.resolved)
    return RoundOutcome(
        round_index=1,
        slots_used=j,
        resolved_in_round=resolved,
        estimate_at_end=est.value,
        termination_reason=Termination.K_IDLE,
        resolved_total=graph.n_resolved,
        saturated=est.saturated,
    )


def run_subsequent_round(
    population: UserPopulation,
    params: ProtocolParams,
    rng,
    graph: ContentionGraph,
    log: ObservationLog,
    n_hat: float,
    n_resolved_prior: int,
    round_index: int = 2,
    estimator: _Estimator | None = None,
    slots: list[SlotRecord] | None = None,
) -> RoundOutcome:
    """One resolution round at constant access probability.

    Stops once ``gamma`` of the estimated contenders are decoded in this
    round or after ``round_slot_cap_factor`` times that many slots (never
    fewer than ``k_idle``). A round run with ``p > 0.5`` is a draining
    round: the gamma rule is replaced by "every estimated user decoded and
    the last ``k_idle`` slots idle", the same silence test that closes the
    initial round. Estimate refreshes inside the round move the gamma
    target but never the access probability.
    """
    n_contending = n_hat - n_resolved_prior
    if not n_contending > 0:
        raise ValueError(f"no estimated contenders left (n_hat={n_hat}, resolved={n_resolved_prior})")
    if estimator is None:
        estimator = _Estimator(log, graph, params)
        estimator.last = MleResult(n_hat)
    p = subsequent_round_prob(n_contending, params.schedule)
    graph.reset_for_round(params.sic_mode)
    draining = p > FINAL_ROUND_PROB
    slot_cap = max(params.k_idle, math.ceil(params.round_slot_cap_factor * n_contending))
    mid_point = max(1, math.ceil(MID_ROUND_FRACTION * n_contending))
    policy = params.update_policy

    est = estimator.last
    if policy is UpdatePolicy.PER_SLOT:
        # a per-slot refresh only feeds the stop tests, which need just its side of a threshold
        at_most = estimator.at_most
    else:
        def at_most(threshold):
            return est.value <= threshold

    before = graph.n_resolved
    used = 0
    idle_run = 0
    reason = Termination.SLOT_CAP_HIT
    while used < slot_cap:
        used += 1
        record = simulate_slot(population, p, rng, round_index, used)
        if slots is not None:
            slots.append(record)
        log.append(Observation(record.observation, p, n_resolved_prior))
        graph.add_slot(record)
        graph.peel()
        idle_run = idle_run + 1 if record.degree == 0 else 0
        if policy is UpdatePolicy.MID_ROUND and used == mid_point:
            est = estimator.refresh()
        if draining:
            # every estimated user decoded: round(n_hat) <= decoded
            if idle_run >= params.k_idle and at_most(graph.n_resolved + 0.5):
                reason = Termination.FINAL_COMPLETE
                break
        else:
            # decoded_in_round >= gamma * (n_hat - resolved_prior)
            in_round = graph.n_resolved - before
            if in_round and at_most(n_resolved_prior + in_round / params.gamma):
                reason = Termination.GAMMA_REACHED
                break
    est = estimator.refresh()
    population.acknowledge(graph.resolved)
    return RoundOutcome(
        round_index=round_index,
        slots_used=used,
        resolved_in_round=graph.n_resolved - before,
        estimate_at_end=est.value,
        termination_reason=reason,
        access_prob=p,
        resolved_total=graph.n_resolved,
        saturated=est.saturated,
    )


def run_protocol(
    true_n: int,
    params: ProtocolParams | None = None,
    seed: int = 0,
    record_slots: bool = False,
) -> ProtocolTrace:
    """Simulate the full protocol for ``true_n`` users from one seed."""
    params = params or ProtocolParams()
    if not 0 <= true_n <= params.n_max_bound:
        raise ValueError(f"true_n must lie in [0, {params.n_max_bound}], got {true_n}")
    rng = make_rng(seed)
    population = UserPopulation(true_n)
    graph = ContentionGraph(true_n, params.degree_cap)
    log = ObservationLog()
    estimator = _Estimator(log, graph, params)
    trace = ProtocolTrace(true_n=true_n)
    if record_slots:
        trace.slots = []
        trace.initial_estimates = []

    first = run_initial_round(
        population, params, rng, graph, log, estimator, trace.slots, trace.initial_estimates
    )
    trace.rounds.append(first)
    n_hat = first.estimate_at_end

    while True:
        if len(trace.rounds) >= params.max_rounds:
            trace.safety_cap_hit = True
            break
        n_resolved = graph.n_resolved
        if not n_hat - n_resolved > 0:
            # every estimated user is already decoded
            if check_final_designation(1.0, n_hat, n_resolved):
                break
            n_hat = estimator.refresh().value
            continue
        outcome = run_subsequent_round(
            population, params, rng, graph, log, n_hat, n_resolved,
            round_index=len(trace.rounds) + 1, estimator=estimator, slots=trace.slots,
        )
        trace.rounds.append(outcome)
        n_hat = outcome.estimate_at_end
        if outcome.termination_reason is Termination.FINAL_COMPLETE and check_final_designation(
            outcome.access_prob, n_hat, graph.n_resolved
        ):
            break

    trace.total_slots = sum(r.slots_used for r in trace.rounds)
    trace.final_estimate = n_hat
    trace.unresolved = true_n - graph.n_resolved
    return trace

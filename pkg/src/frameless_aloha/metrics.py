"""Figures of merit over a batch of protocol runs, and their serialisation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import stats

from .protocol import ProtocolParams, ProtocolTrace

CSV_HEADER = (
    "n_true,repeats,round,rmse_norm,mean_m1_over_n,throughput,"
    "throughput_ci_lo,throughput_ci_hi,unresolved_rate"
)
N_BOOTSTRAP = 1000
ROUND_PRESENCE = 0.9
SIG_DIGITS = 9


@dataclass
class RunBatch:
    n_true: int
    params: ProtocolParams
    traces: list[ProtocolTrace]
    master_seed: int = 0

    def __post_init__(self):
        if any(t.true_n != self.n_true for t in self.traces):
            raise ValueError("all traces in a batch must share the true population size")

    def completed(self) -> list[ProtocolTrace]:
        return [t for t in self.traces if t.completed]

    @property
    def unresolved_rate(self) -> float:
        if not self.traces:
            raise ValueError("empty batch")
        return sum(not t.completed for t in self.traces) / len(self.traces)


def _total_slots(batch: RunBatch) -> np.ndarray:
    if not batch.traces:
        raise ValueError("empty batch")
    m = np.array([t.total_slots for t in batch.completed()], dtype=float)
    if m.size == 0:
        raise ValueError("no run in the batch resolved all users")
    return m


def throughput(batch: RunBatch) -> float:
    """Resolved users per slot, ``N / mean(M)``, over the runs that resolved everyone."""
    return batch.n_true / float(np.mean(_total_slots(batch)))


def throughput_ci(batch: RunBatch, confidence: float = 0.95, n_resamples: int = N_BOOTSTRAP, seed: int = 0):
    """Percentile bootstrap interval for the throughput."""
    m = _total_slots(batch)
    if m.size < 2 or np.all(m == m[0]):
        t = batch.n_true / float(m.mean())
        return t, t
    res = stats.bootstrap(
        (m,),
        lambda x, axis: batch.n_true / np.mean(x, axis=axis),
        n_resamples=n_resamples,
        confidence_level=confidence,
        method="percentile",
        random_state=np.random.default_rng(seed),
    )
    return float(res.confidence_interval.low), float(res.confidence_interval.high)


def paired_throughput_difference_ci(
    a: RunBatch, b: RunBatch, confidence: float = 0.95, n_resamples: int = N_BOOTSTRAP, seed: int = 0
):
    """Bootstrap interval for ``T(a) - T(b)`` resampling repeats jointly.

    ``a`` and ``b`` must hold runs from the same seeds in the same order.
    Only repeats that resolved everyone in both batches are used.
    """
    if a.n_true != b.n_true or len(a.traces) != len(b.traces):
        raise ValueError("paired batches must have the same population and repeat count")
    keep = [i for i, (x, y) in enumerate(zip(a.traces, b.traces)) if x.completed and y.completed]
    if len(keep) < 2:
        raise ValueError("need at least two paired repeats")
    ma = np.array([a.traces[i].total_slots for i in keep], dtype=float)
    mb = np.array([b.traces[i].total_slots for i in keep], dtype=float)
    n = a.n_true

    def diff(x, y, axis):
        return n / np.mean(x, axis=axis) - n / np.mean(y, axis=axis)

    res = stats.bootstrap(
        (ma, mb),
        diff,
        paired=True,
        n_resamples=n_resamples,
        confidence_level=confidence,
        method="percentile",
        random_state=np.random.default_rng(seed),
    )
    return float(diff(ma, mb, None)), float(res.confidence_interval.low), float(res.confidence_interval.high)


def rmse_by_round(batch: RunBatch) -> list[float]:
    """Normalised RMSE of the end-of-round estimate for rounds present in at least 90% of runs."""
    n = batch.n_true
    out = []
    r = 0
    while True:
        est = [t.rounds[r].estimate_at_end for t in batch.traces if len(t.rounds) > r]
        if not batch.traces or len(est) < ROUND_PRESENCE * len(batch.traces):
            break
        err = np.asarray(est) - n
        out.append(math.sqrt(float(np.mean(err * err))) / n)
        r += 1
    return out


def rmse_ci(batch: RunBatch, round_index: int = 1, confidence=0.95, n_resamples=N_BOOTSTRAP, seed=0):
    """Bootstrap interval for the normalised RMSE after round ``round_index`` (1-based)."""
    n = batch.n_true
    err = np.array(
        [t.rounds[round_index - 1].estimate_at_end - n for t in batch.traces if len(t.rounds) >= round_index]
    )
    res = stats.bootstrap(
        (err,),
        lambda e, axis: np.sqrt(np.mean(e * e, axis=axis)) / n,
        n_resamples=n_resamples,
        confidence_level=confidence,
        method="percentile",
        random_state=np.random.default_rng(seed),
    )
    return float(res.confidence_interval.low), float(res.confidence_interval.high)


def _sig(x: float) -> float:
    return float(f"{x:.{SIG_DIGITS}g}")


@dataclass(frozen=True)
class MetricReport:
    """Per-cell summary. Floats are rounded to 9 significant digits on construction.

    ``estimate_mean`` is the mean estimate after the initial round.
    """

    n_true: int
    repeats: int
    rmse_by_round: tuple[float, ...]
    mean_m1_over_n: float
    throughput: float
    throughput_ci_lo: float
    throughput_ci_hi: float
    unresolved_rate: float
    estimate_mean: float
    alpha: float | None = field(default=None)

    def __post_init__(self):
        floats = [
            *self.rmse_by_round,
            self.mean_m1_over_n,
            self.throughput,
            self.throughput_ci_lo,
            self.throughput_ci_hi,
            self.unresolved_rate,
            self.estimate_mean,
        ]
        if any(not math.isfinite(x) for x in floats):
            raise ValueError("metric report fields must be finite")
        if self.throughput <= 0:
            raise ValueError("throughput must be positive")
        if any(x < 0 for x in self.rmse_by_round):
            raise ValueError("rmse values must be nonnegative")
        set_ = object.__setattr__
        set_(self, "rmse_by_round", tuple(_sig(x) for x in self.rmse_by_round))
        for name in ("mean_m1_over_n", "throughput", "throughput_ci_lo", "throughput_ci_hi",
                     "unresolved_rate", "estimate_mean"):
            set_(self, name, _sig(getattr(self, name)))
        if self.alpha is not None:
            set_(self, "alpha", _sig(self.alpha))

    @classmethod
    def from_batch(cls, batch: RunBatch, seed: int = 0, alpha: float | None = None) -> "MetricReport":
        n = batch.n_true
        lo, hi = throughput_ci(batch, seed=seed)
        return cls(
            n_true=n,
            repeats=len(batch.traces),
            rmse_by_round=tuple(rmse_by_round(batch)),
            mean_m1_over_n=float(np.mean([t.rounds[0].slots_used for t in batch.traces])) / n,
            throughput=throughput(batch),
            throughput_ci_lo=lo,
            throughput_ci_hi=hi,
            unresolved_rate=batch.unresolved_rate,
            estimate_mean=float(np.mean([t.rounds[0].estimate_at_end for t in batch.traces])),
            alpha=alpha,
        )

    @classmethod
    def from_json(cls, data: bytes | str) -> "MetricReport":
        d = json.loads(data)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown report fields: {sorted(unknown)}")
        d["rmse_by_round"] = tuple(d["rmse_by_round"])
        return cls(**d)


def emit_report(report: MetricReport, fmt: str = "csv") -> bytes:
    """Serialise a report. CSV has one row per round and the fixed ``CSV_HEADER``."""
    if fmt == "json":
        d = asdict(report)
        d["rmse_by_round"] = list(report.rmse_by_round)
        return (json.dumps(d, indent=2) + "\n").encode()
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")

    def g(x):
        return f"{x:.{SIG_DIGITS}g}"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER.split(","))
    for r, rmse in enumerate(report.rmse_by_round, start=1):
        w.writerow([
            report.n_true, report.repeats, r, g(rmse), g(report.mean_m1_over_n),
            g(report.throughput), g(report.throughput_ci_lo), g(report.throughput_ci_hi),
            g(report.unresolved_rate),
        ])
    return buf.getvalue().encode()


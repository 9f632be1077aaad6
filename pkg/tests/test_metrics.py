import json
import math

import numpy as np
import pytest

from frameless_aloha.metrics import (
    CSV_HEADER,
    MetricReport,
    RunBatch,
    emit_report,
    paired_throughput_difference_ci,
    rmse_by_round,
    rmse_ci,
    throughput,
    throughput_ci,
)
from frameless_aloha.protocol import ProtocolParams, ProtocolTrace, RoundOutcome, Termination, run_protocol


def fake_trace(n, slots, estimates, unresolved=0):
    rounds = [
        RoundOutcome(i + 1, s, 0, e, Termination.GAMMA_REACHED)
        for i, (s, e) in enumerate(zip(slots, estimates))
    ]
    return ProtocolTrace(true_n=n, rounds=rounds, total_slots=sum(slots), final_estimate=estimates[-1],
                         unresolved=unresolved)


def batch_of(traces, n=100):
    return RunBatch(n_true=n, params=ProtocolParams(), traces=traces)


@pytest.fixture(scope="module")
def real_batch():
    params = ProtocolParams()
    return RunBatch(100, params, [run_protocol(100, params, seed=s) for s in range(40)])


def test_throughput_single_trace():
    assert throughput(batch_of([fake_trace(100, [120, 80], [100, 100])])) == 0.5


def test_throughput_excludes_unresolved_runs():
    b = batch_of([fake_trace(100, [200], [100]), fake_trace(100, [50], [90], unresolved=3)])
    assert throughput(b) == 0.5
    assert b.unresolved_rate == 0.5


def test_throughput_rejects_empty_and_all_failed():
    with pytest.raises(ValueError):
        throughput(batch_of([]))
    with pytest.raises(ValueError):
        throughput(batch_of([fake_trace(100, [50], [90], unresolved=1)]))


def test_batch_rejects_mixed_populations():
    with pytest.raises(ValueError):
        batch_of([fake_trace(100, [1], [1]), fake_trace(50, [1], [1])])


def test_throughput_times_mean_slots_is_n(real_batch):
    m = np.mean([t.total_slots for t in real_batch.traces])
    assert throughput(real_batch) * m == pytest.approx(100, rel=1e-9)


def test_rmse_zero_for_exact_estimates():
    b = batch_of([fake_trace(100, [10, 10], [100, 100]) for _ in range(5)])
    assert rmse_by_round(b) == [0.0, 0.0]


def test_rmse_values_and_presence_rule():
    traces = [fake_trace(100, [10, 10], [110, 100]), fake_trace(100, [10, 10], [90, 104])]
    traces += [fake_trace(100, [10], [100]) for _ in range(8)]
    # round 2 appears in only 2 of 10 traces
    got = rmse_by_round(batch_of(traces))
    assert got == pytest.approx([math.sqrt(200 / 10) / 100])


def test_rmse_permutation_invariant(real_batch):
    rev = RunBatch(100, real_batch.params, real_batch.traces[::-1])
    assert rmse_by_round(rev) == pytest.approx(rmse_by_round(real_batch), rel=1e-12)


def test_bootstrap_intervals_bracket_point_estimates(real_batch):
    lo, hi = throughput_ci(real_batch, seed=1)
    assert lo <= throughput(real_batch) <= hi
    rlo, rhi = rmse_ci(real_batch, 1, seed=1)
    assert rlo <= rmse_by_round(real_batch)[0] <= rhi
    assert throughput_ci(real_batch, seed=1) == (lo, hi)


def test_paired_difference_of_identical_batches_is_zero(real_batch):
    d, lo, hi = paired_throughput_difference_ci(real_batch, real_batch)
    assert d == lo == hi == 0.0


def test_report_rejects_nan_and_bad_values():
    base = dict(n_true=10, repeats=1, rmse_by_round=(0.1,), mean_m1_over_n=0.2, throughput=0.5,
                throughput_ci_lo=0.4, throughput_ci_hi=0.6, unresolved_rate=0.0, estimate_mean=10.0)
    MetricReport(**base)
    for key, bad in [("throughput", math.nan), ("throughput", 0.0), ("rmse_by_round", (-0.1,)),
                     ("estimate_mean", math.inf)]:
        with pytest.raises(ValueError):
            MetricReport(**{**base, key: bad})


def test_report_json_round_trip(real_batch):
    rep = MetricReport.from_batch(real_batch, alpha=1.02)
    data = emit_report(rep, "json")
    assert MetricReport.from_json(data) == rep
    assert list(json.loads(data)) == [
        "n_true", "repeats", "rmse_by_round", "mean_m1_over_n", "throughput", "throughput_ci_lo",
        "throughput_ci_hi", "unresolved_rate", "estimate_mean", "alpha",
    ]


def test_report_csv_layout(real_batch):
    rep = MetricReport.from_batch(real_batch)
    lines = emit_report(rep, "csv").decode().splitlines()
    assert lines[0] == CSV_HEADER
    assert CSV_HEADER == (
        "n_true,repeats,round,rmse_norm,mean_m1_over_n,throughput,throughput_ci_lo,throughput_ci_hi,unresolved_rate"
    )
    assert len(lines) == 1 + len(rep.rmse_by_round)
    assert [int(line.split(",")[2]) for line in lines[1:]] == list(range(1, len(lines)))


def test_serialisation_deterministic(real_batch):
    a = MetricReport.from_batch(real_batch, seed=5)
    b = MetricReport.from_batch(real_batch, seed=5)
    assert emit_report(a, "csv") == emit_report(b, "csv")
    assert emit_report(a, "json") == emit_report(b, "json")


def test_emit_rejects_unknown_format(real_batch):
    with pytest.raises(ValueError):
        emit_report(MetricReport.from_batch(real_batch), "xml")


def test_report_rounds_to_nine_significant_digits():
    rep = MetricReport(10, 1, (0.123456789123,), 0.2, 1 / 3, 0.3, 0.4, 0.0, 10.0)
    assert rep.throughput == 0.333333333
    assert rep.rmse_by_round == (0.123456789,)

from __future__ import annotations

import json

import pytest

from servesim.errors import IncompleteRun, NonMonotoneTime, UnknownRequest
from servesim.metrics import (
    MetricsCollector,
    aggregate_rows,
    build_rows,
    finalize,
    nearest_rank,
    read_rows,
    write_report,
)


def collect(*emissions):
    """emissions: (rid, arrival, [token times]) -> finished collector."""
    col = MetricsCollector()
    for rid, arrival, times in emissions:
        col.register(rid, arrival, input_len=8, output_len=len(times))
        for t in times:
            col.record_token(rid, t)
        col.mark_finished(rid, times[-1], instance_id="i0")
    return col


def test_ttft_itl_tpot_from_a_three_token_timeline():
    # arrival at 0; tokens at 0.5s, 0.6s, 0.7s
    col = collect(("r0", 0, [500_000, 600_000, 700_000]))
    row = build_rows(list(col.records.values()))[0]
    assert row["ttft_us"] == 500_000
    assert row["tpot_us"] == 100_000
    assert row["mean_itl_us"] == 100_000
    assert row["first_token_us"] == 500_000
    assert row["completion_us"] == 700_000


def test_mean_itl_equals_tpot_identically():
    col = collect(("r0", 10, [40, 75, 160, 161]),
                  ("r1", 5, [1000, 1003]))
    for row in build_rows(list(col.records.values())):
        assert row["mean_itl_us"] == row["tpot_us"]


def test_single_token_requests_leave_rate_fields_blank():
    col = collect(("r0", 0, [300]))
    row = build_rows(list(col.records.values()))[0]
    assert row["tpot_us"] == ""
    assert row["mean_itl_us"] == ""
    assert row["ttft_us"] == 300


def test_throughput_is_tokens_over_span():
    # 200 tokens delivered within 10s of the first arrival -> 20 tok/s
    step = 100_000
    col = collect(
        ("r0", 0, [step * (i + 1) for i in range(100)]),        # ends at 10s
        ("r1", 0, [step * (i + 1) - 1 for i in range(100)]))
    rows = build_rows(list(col.records.values()))
    agg = aggregate_rows(rows)
    assert agg["total_output_tokens"] == 200
    assert agg["span_us"] == 10_000_000
    assert agg["token_throughput_per_s"] == pytest.approx(20.0)
    assert agg["request_throughput_per_s"] == pytest.approx(0.2)


def test_tokens_must_move_strictly_forward():
    col = MetricsCollector()
    col.register("r0", 100, 4, 3)
    col.record_token("r0", 150)
    with pytest.raises(NonMonotoneTime):
        col.record_token("r0", 150)
    with pytest.raises(NonMonotoneTime):
        col.record_token("r0", 90)
    col2 = MetricsCollector()
    col2.register("r1", 100, 4, 1)
    with pytest.raises(NonMonotoneTime):
        col2.record_token("r1", 99)     # before arrival


def test_unknown_and_duplicate_requests_rejected():
    col = MetricsCollector()
    with pytest.raises(UnknownRequest):
        col.record_token("ghost", 1)
    with pytest.raises(UnknownRequest):
        col.mark_finished("ghost", 1)
    col.register("r0", 0, 1, 1)
    with pytest.raises(UnknownRequest):
        col.register("r0", 0, 1, 1)
    col.record_token("r0", 5)
    col.mark_finished("r0", 5)
    with pytest.raises(UnknownRequest):
        col.record_token("r0", 6)       # finished requests emit nothing


def test_finalize_raises_on_unfinished_requests():
    col = MetricsCollector()
    col.register("r0", 0, 1, 2)
    col.record_token("r0", 10)
    with pytest.raises(IncompleteRun):
        finalize(col, seed=1, config_echo={})
    report = finalize(col, seed=1, config_echo={}, allow_incomplete=True)
    assert report.rows == []
    assert col.unfinished() == ["r0"]


def test_nearest_rank_percentile_small_samples():
    assert nearest_rank([1, 2, 3, 4], 0.99) == 4
    assert nearest_rank([1, 2, 3, 4], 0.5) == 2
    assert nearest_rank([7], 0.99) == 7
    with pytest.raises(ValueError):
        nearest_rank([], 0.5)
    samples = sorted(range(1, 101))
    assert nearest_rank(samples, 0.99) == 99


def test_aggregate_percentiles_and_counts():
    col = collect(*[(f"r{i}", 0, [(i + 1) * 10]) for i in range(100)])
    rows = build_rows(list(col.records.values()))
    agg = aggregate_rows(rows)
    assert agg["requests"] == 100
    assert agg["ttft_us"]["count"] == 100
    assert agg["ttft_us"]["p99"] == 990.0
    assert agg["ttft_us"]["max"] == 1000.0
    assert agg["tpot_us"] == {"count": 0}


def test_rows_sorted_by_arrival_then_id():
    col = collect(("zz", 5, [10]), ("aa", 5, [20]), ("mm", 1, [30]))
    rows = build_rows(list(col.records.values()))
    assert [r["request_id"] for r in rows] == ["mm", "aa", "zz"]


def test_annotations_land_in_rows():
    col = collect(("r0", 0, [10, 20]))
    col.annotate("r0", prefix_blocks_matched=3, prefix_blocks_lookup=4,
                 preemptions=1)
    row = build_rows(list(col.records.values()))[0]
    assert row["prefix_blocks_matched"] == 3
    assert row["prefix_blocks_lookup"] == 4
    assert row["preemptions"] == 1
    assert row["instance_id"] == "i0"


def test_write_report_round_trips_and_self_checks(tmp_path):
    col = collect(("r0", 0, [500_000, 600_000, 700_000]),
                  ("r1", 100, [400]))
    report = finalize(col, seed=9, config_echo={"k": "v"},
                      warnings=["note"])
    csv_path, json_path = write_report(report, str(tmp_path / "out"))
    rows = read_rows(csv_path)
    assert aggregate_rows(rows) == report.aggregates
    assert rows[0]["token_times_us"] == "500000 600000 700000"
    with open(csv_path, encoding="utf-8") as fh:
        first = fh.readline()
    assert first.startswith("# schema: servesim.per_request.v1")
    with open(json_path, encoding="utf-8") as fh:
        summary = json.load(fh)
    assert summary["schema"] == "servesim.summary.v1"
    assert summary["seed"] == 9
    assert summary["warnings"] == ["note"]
    assert summary["config_echo"] == {"k": "v"}
    assert summary["aggregates"]["ttft_us"]["median"] == pytest.approx(250150.0)

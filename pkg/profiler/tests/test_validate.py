"""Validation arithmetic, self-consistency, and fault injection."""

import csv
import json

import pytest

from layerprof import (CoverageGap, PlanError, build_model, run_profile,
                       validate_trace, write_trace)

from conftest import CONST_US, constant_script, scripted, small_plan

ALL_SHAPES = [("prefill", 1, 0, 1), ("prefill", 4, 64, 1),
              ("decode", 1, 0, 1), ("decode", 4, 64, 1)]


def make_trace(model, tmp_path, plan=None, adapter=None):
    plan = plan or small_plan(model.spec.model_id)
    result = run_profile(plan, model, adapter or scripted())
    return write_trace(result, str(tmp_path))[0]


def corrupt_entry(csv_path, op_kind, phase, batch, context, factor):
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    for row in rows[1:]:
        if (row[2], row[3], int(row[4]), int(row[5])) == \
                (op_kind, phase, batch, context):
            row[7] = str(int(row[7]) * factor)
    with open(csv_path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def test_consistent_table_validates_under_one_percent(tiny1, tmp_path):
    """A table and measurement from the same deterministic clock must
    agree to well under 1%: the comparison arithmetic adds no error."""
    trace = make_trace(tiny1, tmp_path)
    report = validate_trace(trace, tiny1, scripted(), ALL_SHAPES,
                            repetitions=3, warmup=1)
    assert len(report.shapes) == 4
    total = sum(CONST_US.values())
    for check in report.shapes:
        assert check.predicted_us == total
        assert check.measured_us == total
        assert check.rel_error == 0.0
        assert not check.flagged
    assert report.mean_rel_error == 0.0
    assert report.mean_rel_error < 0.01
    assert not report.flagged and not report.coverage_gaps


def test_two_layer_prediction_prices_per_layer_ops_twice(tiny2, tmp_path):
    trace = make_trace(tiny2, tmp_path, plan=small_plan("tiny-2l"))
    report = validate_trace(trace, tiny2, scripted(), [("decode", 4, 64, 1)],
                            repetitions=3, warmup=1)
    per_layer = CONST_US["Norm"] + CONST_US["Attention"] + CONST_US["FFN"]
    expected = CONST_US["Embedding"] + CONST_US["LMHead"] + 2 * per_layer
    assert report.shapes[0].predicted_us == expected
    assert report.shapes[0].rel_error == 0.0


def test_corrupted_entry_is_flagged_at_exactly_its_share(tiny1, tmp_path):
    trace = make_trace(tiny1, tmp_path)
    corrupt_entry(trace, "FFN", "prefill", 4, 64, factor=2)
    report = validate_trace(trace, tiny1, scripted(), ALL_SHAPES,
                            repetitions=3, warmup=1)
    flagged = report.flagged
    assert [(s.phase, s.batch, s.context) for s in flagged] == \
        [("prefill", 4, 64)]
    total = sum(CONST_US.values())
    bad = flagged[0]
    assert bad.predicted_us == total + CONST_US["FFN"]
    assert bad.measured_us == total
    assert bad.rel_error == pytest.approx(
        CONST_US["FFN"] / (total + CONST_US["FFN"]))
    clean = [s for s in report.shapes if not s.flagged]
    assert len(clean) == 3 and all(s.rel_error == 0.0 for s in clean)


def test_unprofiled_shape_is_a_coverage_gap_not_a_guess(tiny1, tmp_path):
    trace = make_trace(tiny1, tmp_path)
    report = validate_trace(trace, tiny1, scripted(),
                            [("prefill", 1, 0, 1), ("prefill", 3, 128, 1)],
                            repetitions=3, warmup=1)
    assert len(report.shapes) == 1
    assert len(report.coverage_gaps) == 1
    gap = report.coverage_gaps[0]
    assert (gap.phase, gap.batch, gap.context) == ("prefill", 3, 128)
    assert gap.missing_op == "Embedding"


def test_all_gaps_raises_coverage_gap(tiny1, tmp_path):
    trace = make_trace(tiny1, tmp_path)
    with pytest.raises(CoverageGap):
        validate_trace(trace, tiny1, scripted(), [("decode", 7, 3, 1)],
                       repetitions=3, warmup=1)


def test_model_and_trace_must_match(tiny1, tiny2, tmp_path):
    trace = make_trace(tiny1, tmp_path)
    with pytest.raises(PlanError, match="profiled for 'tiny-1l'"):
        validate_trace(trace, tiny2, scripted(), ALL_SHAPES,
                       repetitions=3, warmup=1)


def test_tampered_sidecar_layer_count_is_refused(tiny1, tmp_path):
    trace = make_trace(tiny1, tmp_path)
    sidecar = trace.replace(".csv", ".meta.json")
    meta = json.load(open(sidecar))
    meta["layer_count"] = 9
    json.dump(meta, open(sidecar, "w"))
    with pytest.raises(PlanError, match="layer_count"):
        validate_trace(trace, tiny1, scripted(), ALL_SHAPES,
                       repetitions=3, warmup=1)


def test_validation_rep_invariants(tiny1, tmp_path):
    trace = make_trace(tiny1, tmp_path)
    with pytest.raises(PlanError):
        validate_trace(trace, tiny1, scripted(), ALL_SHAPES, repetitions=2)
    with pytest.raises(PlanError):
        validate_trace(trace, tiny1, scripted(), ALL_SHAPES, warmup=0)


def test_report_lines_are_printable(tiny1, tmp_path):
    trace = make_trace(tiny1, tmp_path)
    corrupt_entry(trace, "Norm", "decode", 1, 0, factor=5)
    report = validate_trace(trace, tiny1, scripted(),
                            ALL_SHAPES + [("decode", 9, 9, 1)],
                            repetitions=3, warmup=1)
    text = "\n".join(report.lines())
    assert "FLAG" in text
    assert "coverage gap" in text
    assert "mean_rel_error" in text

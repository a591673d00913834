"""Profiling arithmetic pinned by the scripted clock."""

import pytest

from layerprof import ScriptedAdapter, build_model, run_profile
from layerprof.profile import round_half_up

from conftest import CONST_US, constant_script, scripted, small_plan


def test_one_grid_point_yields_one_record_per_operator(tiny1):
    plan = small_plan(phases=("prefill",), batches=(4,), contexts=(0,))
    result = run_profile(plan, tiny1, scripted())
    assert len(result.rows) == 5
    assert result.rows[("FFN", "prefill", 4, 0, 1)] == CONST_US["FFN"]
    assert set(op for op, *_ in result.rows) == set(CONST_US)


def test_record_count_is_ops_times_grid_points(tiny1):
    plan = small_plan()           # 2 phases x 2 batches x 2 contexts
    result = run_profile(plan, tiny1, scripted())
    assert plan.grid_size() == 8
    assert len(result.rows) == 5 * 8
    assert not result.gaps and not result.warnings


def test_entry_is_the_median_of_recorded_reps(tiny1):
    # recorded reps see 98, 100, 141; warmup reps would poison the median
    # with 10_000 if they leaked in
    def script(op, layer, phase, batch, context, tp, rep):
        if rep < 0:
            return 10_000
        return [98, 100, 141][rep]

    plan = small_plan(phases=("decode",), batches=(1,), contexts=(0,),
                      warmup=2, repetitions=3)
    result = run_profile(plan, tiny1, ScriptedAdapter(script))
    assert result.rows[("Attention", "decode", 1, 0, 1)] == 100


def test_median_is_permutation_invariant(tiny1):
    def make(order):
        def script(op, layer, phase, batch, context, tp, rep):
            return order[rep] if rep >= 0 else 1
        return script

    plan = small_plan(phases=("decode",), batches=(1,), contexts=(0,),
                      warmup=1, repetitions=3)
    rows = [run_profile(plan, tiny1, ScriptedAdapter(make(o))).rows
            for o in ([98, 100, 141], [141, 98, 100], [100, 141, 98])]
    assert rows[0] == rows[1] == rows[2]


def test_layers_pool_their_samples(tiny2):
    # layer 0 runs at 10us, layer 1 at 30us -> median of {10,30}x3 is 20
    def script(op, layer, phase, batch, context, tp, rep):
        if op in ("Embedding", "LMHead"):
            return 5
        return 10 if layer == 0 else 30

    plan = small_plan("tiny-2l", phases=("prefill",), batches=(2,),
                      contexts=(0,), warmup=1, repetitions=3)
    result = run_profile(plan, tiny2, ScriptedAdapter(script))
    assert result.rows[("Norm", "prefill", 2, 0, 1)] == 20
    assert result.rows[("Embedding", "prefill", 2, 0, 1)] == 5


def test_even_rep_counts_round_half_up(tiny1):
    def script(op, layer, phase, batch, context, tp, rep):
        return [10, 10, 11, 11][rep] if rep >= 0 else 1

    plan = small_plan(phases=("decode",), batches=(1,), contexts=(0,),
                      warmup=1, repetitions=4)
    result = run_profile(plan, tiny1, ScriptedAdapter(script))
    assert result.rows[("FFN", "decode", 1, 0, 1)] == 11    # median 10.5


def test_sub_microsecond_medians_clamp_to_one(tiny1):
    plan = small_plan(phases=("decode",), batches=(1,), contexts=(0,))
    result = run_profile(
        plan, tiny1, ScriptedAdapter(lambda *a: 0.2))
    assert all(lat == 1 for lat in result.rows.values())


def test_oom_point_becomes_a_gap_with_a_warning_not_a_number(tiny1):
    budget = tiny1.estimate_elements("prefill", 4, 0, 1)
    adapter = scripted(element_budget=budget)
    plan = small_plan(phases=("prefill",), batches=(4, 64),
                      contexts=(0,))
    result = run_profile(plan, tiny1, adapter)
    assert len(result.gaps) == 1
    gap = result.gaps[0]
    assert (gap.phase, gap.batch, gap.context, gap.tp_degree) == \
        ("prefill", 64, 0, 1)
    assert len(result.warnings) == 1
    assert "skipped prefill batch=64" in result.warnings[0]
    # the skipped point left no rows; the fitting point kept all five
    assert len(result.rows) == 5
    assert all(batch == 4 for (_op, _ph, batch, _c, _tp) in result.rows)


def test_plan_and_model_must_agree(tiny1):
    plan = small_plan("tiny-2l", phases=("prefill",), batches=(1,),
                      contexts=(0,))
    with pytest.raises(ValueError):
        run_profile(plan, tiny1, scripted())


def test_round_half_up():
    assert round_half_up(10.5) == 11
    assert round_half_up(10.49) == 10
    assert round_half_up(0.5) == 1

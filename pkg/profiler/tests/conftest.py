"""Shared fixtures: deterministic scripted clocks and tiny plans."""

import pytest

from layerprof import ProfilePlan, ScriptedAdapter, build_model

# integer microseconds so median -> int rounding is a no-op and scripted
# runs stay exactly reproducible
CONST_US = {"Embedding": 40, "Norm": 10, "Attention": 80, "FFN": 120,
            "LMHead": 60}


def constant_script(op_kind, layer_idx, phase, batch, context, tp, rep):
    return CONST_US[op_kind]


def affine_script(op_kind, layer_idx, phase, batch, context, tp, rep):
    base = CONST_US[op_kind]
    return base + 2 * batch + (1 if phase == "decode" else 0) * context


@pytest.fixture
def tiny1():
    return build_model("tiny-1l")


@pytest.fixture
def tiny2():
    return build_model("tiny-2l")


def small_plan(model_id="tiny-1l", **overrides):
    kwargs = dict(model_id=model_id, hw_id="scripted",
                  phases=("prefill", "decode"), batches=(1, 4),
                  contexts=(0, 64), tp_degrees=(1,), warmup=1,
                  repetitions=3)
    kwargs.update(overrides)
    return ProfilePlan(**kwargs)


def scripted(script=constant_script, **kwargs):
    return ScriptedAdapter(script, **kwargs)

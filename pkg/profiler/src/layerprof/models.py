"""Toy transformer models the profiler can run on real hardware.

Each model decomposes one forward pass into the operator sequence the
simulator prices: Embedding once, then Norm/Attention/FFN per layer, then
LMHead once. ``op_steps`` builds all inputs and weights up front and
returns closures so the adapter times nothing but the operator math.

Prefill treats ``batch`` as tokens of one sequence attending over a shared
KV prefix of length ``context``; decode treats ``batch`` as sequences each
producing one token against its own cache of length ``context``. Tensor
parallelism shards the projection/FFN/LMHead feature dimensions by
``tp_degree`` and times one shard, which is what a per-device latency
table wants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .device import OpStep
from .errors import PlanError

OP_EMBEDDING = "Embedding"
OP_NORM = "Norm"
OP_ATTENTION = "Attention"
OP_FFN = "FFN"
OP_LM_HEAD = "LMHead"

# ops priced once per iteration by the consumer; everything else per layer
PER_ITERATION_OPS = {OP_EMBEDDING, OP_LM_HEAD}


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    layer_count: int
    hidden: int
    vocab: int
    ffn_mult: int = 4
    max_context: int = 1024
    max_batch: int = 64
    dtype_bytes: int = 4          # float32


REGISTRY = {
    "tiny-1l": ModelSpec("tiny-1l", layer_count=1, hidden=64, vocab=512),
    "tiny-2l": ModelSpec("tiny-2l", layer_count=2, hidden=64, vocab=512),
}


class ToyModel:
    """One registered model with lazily built, per-tp-degree weight shards."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self._shards: dict[int, dict[str, torch.Tensor]] = {}

    # --- structure ---

    def op_sequence(self, phase: str) -> list[tuple[str, int]]:
        """Ordered (op_kind, layer_idx) pairs of one forward pass."""
        seq: list[tuple[str, int]] = [(OP_EMBEDDING, -1)]
        for layer in range(self.spec.layer_count):
            seq += [(OP_NORM, layer), (OP_ATTENTION, layer), (OP_FFN, layer)]
        seq.append((OP_LM_HEAD, -1))
        return seq

    def op_kinds(self) -> list[str]:
        return [OP_EMBEDDING, OP_NORM, OP_ATTENTION, OP_FFN, OP_LM_HEAD]

    def model_meta(self) -> dict:
        s = self.spec
        return {
            "schema": "servesim.model_meta.v1",
            "model_id": s.model_id,
            "layer_count": s.layer_count,
            "hidden_size": s.hidden,
            # one K plus one V row per token per layer
            "kv_bytes_per_token_per_layer": 2 * s.hidden * s.dtype_bytes,
            "dtype_bytes": s.dtype_bytes,
        }

    def estimate_elements(self, phase: str, batch: int, context: int,
                          tp_degree: int) -> int:
        """Rough tensor-element footprint of one pass, for the OOM guard."""
        s = self.spec
        hs = s.hidden // tp_degree
        fs = s.ffn_mult * s.hidden // tp_degree
        vs = s.vocab // tp_degree
        weights = (s.vocab * s.hidden
                   + s.layer_count * (3 * s.hidden * hs + hs * s.hidden
                                      + s.hidden * fs + fs * s.hidden)
                   + s.hidden * vs)
        kv = (batch if phase == "decode" else 1) * context * hs * 2
        scores = batch * (context + (batch if phase == "prefill" else 0))
        acts = 4 * batch * max(s.hidden, fs) + batch * vs
        return weights + kv + scores + acts

    # --- weights / inputs ---

    def _weights(self, tp_degree: int) -> dict[str, torch.Tensor]:
        s = self.spec
        if s.hidden % tp_degree or (s.ffn_mult * s.hidden) % tp_degree \
                or s.vocab % tp_degree:
            raise PlanError(
                f"tp_degree {tp_degree} does not divide model dims of "
                f"{s.model_id}")
        if tp_degree not in self._shards:
            gen = torch.Generator().manual_seed(hash((s.model_id, tp_degree))
                                                & 0x7FFFFFFF)
            hs = s.hidden // tp_degree
            fs = s.ffn_mult * s.hidden // tp_degree
            vs = s.vocab // tp_degree

            def rand(*shape):
                return torch.randn(*shape, generator=gen) * 0.02

            w = {"embed": rand(s.vocab, s.hidden), "lm": rand(s.hidden, vs)}
            for layer in range(s.layer_count):
                w[f"q{layer}"] = rand(s.hidden, hs)
                w[f"k{layer}"] = rand(s.hidden, hs)
                w[f"v{layer}"] = rand(s.hidden, hs)
                w[f"o{layer}"] = rand(hs, s.hidden)
                w[f"f1_{layer}"] = rand(s.hidden, fs)
                w[f"f2_{layer}"] = rand(fs, s.hidden)
            self._shards[tp_degree] = w
        return self._shards[tp_degree]

    def op_steps(self, phase: str, batch: int, context: int, tp_degree: int,
                 seed: int = 0) -> list[OpStep]:
        """Closures for one pass; all tensors are allocated before return."""
        if phase not in ("prefill", "decode"):
            raise PlanError(f"phase must be prefill|decode, got {phase!r}")
        s = self.spec
        w = self._weights(tp_degree)
        hs = s.hidden // tp_degree
        gen = torch.Generator().manual_seed(seed)
        ids = torch.randint(0, s.vocab, (batch,), generator=gen)
        if phase == "prefill":
            kv_k = torch.randn(context, hs, generator=gen)
            kv_v = torch.randn(context, hs, generator=gen)
        else:
            kv_k = torch.randn(batch, context, hs, generator=gen)
            kv_v = torch.randn(batch, context, hs, generator=gen)
        state: dict[str, torch.Tensor] = {}
        scale = 1.0 / math.sqrt(hs)

        def embed():
            state["x"] = w["embed"][ids]

        def make_norm(layer: int):
            def norm():
                state["x"] = F.layer_norm(state["x"], (s.hidden,))
            return norm

        def make_attention(layer: int):
            def attention():
                x = state["x"]
                q = x @ w[f"q{layer}"]
                k = x @ w[f"k{layer}"]
                v = x @ w[f"v{layer}"]
                if phase == "prefill":
                    keys = torch.cat([kv_k, k], dim=0)
                    vals = torch.cat([kv_v, v], dim=0)
                    probs = F.softmax(q @ keys.T * scale, dim=-1)
                    ctx_out = probs @ vals
                else:
                    keys = torch.cat([kv_k, k.unsqueeze(1)], dim=1)
                    vals = torch.cat([kv_v, v.unsqueeze(1)], dim=1)
                    scores = torch.einsum("bh,bch->bc", q, keys) * scale
                    probs = F.softmax(scores, dim=-1)
                    ctx_out = torch.einsum("bc,bch->bh", probs, vals)
                state["x"] = ctx_out @ w[f"o{layer}"]
            return attention

        def make_ffn(layer: int):
            def ffn():
                x = state["x"]
                state["x"] = F.gelu(x @ w[f"f1_{layer}"]) @ w[f"f2_{layer}"]
            return ffn

        def lm_head():
            state["logits"] = state["x"] @ w["lm"]

        steps: list[OpStep] = [(OP_EMBEDDING, -1, embed)]
        for layer in range(s.layer_count):
            steps += [(OP_NORM, layer, make_norm(layer)),
                      (OP_ATTENTION, layer, make_attention(layer)),
                      (OP_FFN, layer, make_ffn(layer))]
        steps.append((OP_LM_HEAD, -1, lm_head))
        return steps


def build_model(model_id: str) -> ToyModel:
    if model_id not in REGISTRY:
        known = ", ".join(sorted(REGISTRY))
        raise PlanError(f"unknown model id {model_id!r}; known: {known}")
    return ToyModel(REGISTRY[model_id])

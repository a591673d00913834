"""Cluster-level request placement.

Policies: RoundRobin (cyclic over the eligible list, sorted by instance
id), LeastOutstandingTokens (fewest queued+running tokens, lowest id on
ties) and PrefixAware (longest cached-prefix match wins, falling back to
LeastOutstandingTokens on ties, including the all-miss case). Subclass
RoutingPolicy to plug in custom logic.

Under prefill/decode disaggregation, arrival dispatch only considers
Prefill-role instances; the decode target is chosen when prefill completes,
either from a static pairing map or by LeastOutstandingTokens over the
Decode-role instances.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Optional

from .errors import NoEligibleInstance


class RoutingPolicy(ABC):
    @abstractmethod
    def choose(self, eligible: list, request) -> object:
        """Pick one instance from a non-empty eligible list."""


class RoundRobin(RoutingPolicy):
    def __init__(self) -> None:
        self._counter = 0

    def choose(self, eligible: list, request) -> object:
        pick = eligible[self._counter % len(eligible)]
        self._counter += 1
        return pick


class LeastOutstandingTokens(RoutingPolicy):
    def choose(self, eligible: list, request) -> object:
        return min(eligible,
                   key=lambda inst: (inst.outstanding_tokens(), inst.instance_id))


class PrefixAware(RoutingPolicy):
    def __init__(self) -> None:
        self._fallback = LeastOutstandingTokens()

    def choose(self, eligible: list, request) -> object:
        ids = getattr(request, "token_ids", None)
        if ids:
            scored = [(inst.peek_prefix(ids), inst) for inst in eligible]
            best = max(score for score, _ in scored)
            if best > 0:
                tied = [inst for score, inst in scored if score == best]
                return self._fallback.choose(tied, request)
        return self._fallback.choose(eligible, request)


POLICIES = {
    "round_robin": RoundRobin,
    "least_tokens": LeastOutstandingTokens,
    "prefix_aware": PrefixAware,
}


class Router:
    """Front door: one dispatch decision per request, counted exactly once."""

    def __init__(self, instances: list, policy: RoutingPolicy,
                 pd_pairing: Optional[RoutingPolicy] = None,
                 static_pairs: Optional[dict[str, str]] = None):
        self.instances = sorted(instances, key=lambda i: i.instance_id)
        self.policy = policy
        self.pd_pairing = pd_pairing
        self.static_pairs = dict(static_pairs or {})
        self.dispatch_counts: dict[str, int] = {
            i.instance_id: 0 for i in self.instances}

    def _eligible(self, request, roles: tuple[str, ...]) -> list:
        out = []
        for inst in self.instances:
            if inst.role.value not in roles:
                continue
            if request.model_id is not None and inst.model_id != request.model_id:
                continue
            out.append(inst)
        if not out:
            raise NoEligibleInstance(
                f"no {'/'.join(roles)} instance serves request "
                f"{request.request_id!r} (model {request.model_id!r})")
        return out

    def dispatch(self, request):
        inst = self.policy.choose(self._eligible(request, ("unified",)), request)
        self.dispatch_counts[inst.instance_id] += 1
        return inst

    def dispatch_prefill(self, request):
        inst = self.policy.choose(self._eligible(request, ("prefill",)), request)
        self.dispatch_counts[inst.instance_id] += 1
        return inst

    def choose_decode(self, request, prefill_instance):
        if self.static_pairs:
            target = self.static_pairs.get(prefill_instance.instance_id)
            if target is None:
                raise NoEligibleInstance(
                    f"no static decode pair for {prefill_instance.instance_id}")
            for inst in self.instances:
                if inst.instance_id == target:
                    return inst
            raise NoEligibleInstance(f"static decode pair {target!r} not found")
        pairing = self.pd_pairing or LeastOutstandingTokens()
        return pairing.choose(self._eligible(request, ("decode",)), request)

"""Eviction policies and the decode-loop simulator.

A policy looks at the cache, the running per-token attention scores and the
current step's weights, and names one victim: a cached token to evict, or
the incoming token itself (refused admission), or nothing while the cache
is still filling.

Policies
--------
``full``
    Never evicts; the budget must cover the whole sequence.
``local``
    Keeps only the most recent tokens: always evicts the oldest cached one.
``h2o``
    Heavy-hitter policy. Half roles: the most recently admitted tokens
    (``recent_frac`` of the budget) are shielded; among the remaining
    candidates plus the incoming token, it evicts the one whose removal
    maximizes the score function over the survivors. Because the score
    function is a non-decreasing transform of the summed accumulated
    scores, that argmax is the candidate with the minimum accumulated
    score; decide() uses the cheap form, and the test suite pins the
    equivalence against the literal argmax-over-removals.
``h2_only``
    Minimum accumulated score with no recency shield.
``sink_local``
    Never evicts the first ``sink`` tokens; otherwise evicts the oldest.
``sparse_strided`` / ``sparse_fixed``
    Static attention-mask patterns recast as eviction rules: evict the
    lowest-indexed cached token that falls outside the pattern for the
    current step (oldest cached as a fallback when every cached token is
    still on-pattern).
``topk``
    Memoryless heavy-hitter: evicts the cached token with the smallest
    current-step weight.

Ties everywhere break toward the lowest token index, so a simulation is a
pure function of (trace, config).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Mapping

import numpy as np

from .attention import StepAttention, masked_step
from .cache import CacheState, EvictionEvent
from .errors import BudgetExceeded, InconsistentState, InvalidSpec
from .trace import AttentionTrace

POLICY_KINDS = (
    "full",
    "local",
    "h2o",
    "h2_only",
    "sink_local",
    "sparse_strided",
    "sparse_fixed",
    "topk",
)

SCORE_FUNCTIONS: dict[str, Callable[[float], float]] = {
    "identity": lambda z: z,
    "sqrt1p": lambda z: math.sqrt(z + 1.0),
    "log1p": lambda z: math.log1p(z),
}


def score_function(kind: str) -> Callable[[float], float]:
    """Non-decreasing concave transform applied to summed scores."""
    try:
        return SCORE_FUNCTIONS[kind]
    except KeyError:
        raise InvalidSpec(f"unknown score function {kind!r}") from None


@dataclass(frozen=True)
class AccumulatedScores:
    """Running attention mass received per cached token.

    One length-<=k map, updated each step with the new normalized weights;
    an evicted token's entry is dropped and can never return. Scores are
    non-negative and non-decreasing while a token stays cached.
    """

    scores: dict[int, float] = field(default_factory=dict)
    last_updated_step: int = 0

    @classmethod
    def empty(cls) -> "AccumulatedScores":
        return cls({}, 0)

    def get(self, token: int, default: float = 0.0) -> float:
        return self.scores.get(token, default)

    def __contains__(self, token: int) -> bool:
        return token in self.scores

    def without(self, token: int) -> "AccumulatedScores":
        pruned = {t: s for t, s in self.scores.items() if t != token}
        return AccumulatedScores(pruned, self.last_updated_step)

    def zeroed(self, token: int) -> "AccumulatedScores":
        updated = dict(self.scores)
        updated[token] = 0.0
        return AccumulatedScores(updated, self.last_updated_step)


def update_scores(scores: AccumulatedScores, step_attention: StepAttention) -> AccumulatedScores:
    """Add one step's weights; a first-seen token starts at its own weight."""
    updated = dict(scores.scores)
    for token, w in step_attention.weights.items():
        updated[token] = updated.get(token, 0.0) + w
    return AccumulatedScores(updated, step_attention.index)


@dataclass(frozen=True)
class PolicyConfig:
    """Which policy to run and its knobs.

    ``recent_frac`` splits the h2o budget: floor(recent_frac * budget)
    slots act as the recency shield and the rest hold heavy hitters.
    ``init_score_from_self`` controls the incoming token's starting score:
    its own self-attention weight (default) or zero.
    """

    kind: str
    budget: int
    recent_frac: float = 0.5
    sink: int = 4
    stride: int = 8
    score_fn: str = "identity"
    init_score_from_self: bool = True

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise InvalidSpec(f"unknown policy {self.kind!r}; choose from {POLICY_KINDS}")
        if self.budget < 1:
            raise InvalidSpec("budget must be >= 1")
        if not 0.0 <= self.recent_frac <= 1.0:
            raise InvalidSpec("recent_frac must lie in [0, 1]")
        if self.sink < 0:
            raise InvalidSpec("sink must be >= 0")
        if self.stride < 1:
            raise InvalidSpec("stride must be >= 1")
        score_function(self.score_fn)

    @property
    def recent_budget(self) -> int:
        return int(self.recent_frac * self.budget)

    @property
    def heavy_budget(self) -> int:
        # the two roles always partition the budget exactly
        return self.budget - self.recent_budget


def strided_pattern_member(token: int, step: int, stride: int) -> bool:
    """Strided mask: a local window plus every stride-th earlier position."""
    gap = step - token
    return gap < stride or gap % stride == 0


def fixed_pattern_member(token: int, step: int, stride: int) -> bool:
    """Fixed mask: same block as the step, or a block-summary position."""
    return (token - 1) // stride == (step - 1) // stride or token % stride == 0


def _min_score_token(tokens, scores: AccumulatedScores) -> int:
    missing = [t for t in tokens if t not in scores]
    if missing:
        raise InconsistentState(f"no accumulated score for candidates {sorted(missing)}")
    return min(tokens, key=lambda t: (scores.get(t), t))


def decide(
    policy: PolicyConfig,
    scores: AccumulatedScores,
    cache: CacheState,
    step_attention: StepAttention,
    i: int,
) -> int | None:
    """Pick the eviction victim for step ``i`` on a cache at budget.

    ``scores`` must already include the current step's weights (so the
    incoming token carries its initial score). Returns the victim token
    (possibly ``i`` itself) or None for the full policy.
    """
    kind = policy.kind
    if kind == "full":
        return None
    tracked = cache.tracked
    if not tracked:
        raise InconsistentState("decide() called on an empty cache")
    if kind == "local":
        return min(tracked)
    if kind == "sink_local":
        movable = [t for t in tracked if t > policy.sink]
        return min(movable) if movable else i
    if kind == "sparse_strided":
        off = [t for t in tracked if not strided_pattern_member(t, i, policy.stride)]
        return min(off) if off else min(tracked)
    if kind == "sparse_fixed":
        off = [t for t in tracked if not fixed_pattern_member(t, i, policy.stride)]
        return min(off) if off else min(tracked)
    if kind == "topk":
        return min(tracked, key=lambda t: (step_attention.weight(t), t))
    if kind == "h2_only":
        return _min_score_token(sorted(tracked) + [i], scores)
    if kind == "h2o":
        shielded = set(cache.recent_tokens)
        candidates = sorted(t for t in tracked if t not in shielded) + [i]
        return _min_score_token(candidates, scores)
    raise InvalidSpec(f"unknown policy {kind!r}")


@dataclass
class SimulationRecord:
    """Replayable outcome of one decode simulation.

    Stores one eviction event per step; the per-step cached sets are
    reconstructed on demand instead of materialized (a full-length list of
    sets would dominate memory for long traces). ``step_attentions`` holds
    the prediction-time weights (over cache plus the incoming token) when
    the run recorded them.
    """

    config: PolicyConfig
    n: int
    events: list[EvictionEvent]
    final_tracked: frozenset[int]
    final_scores: AccumulatedScores
    step_attentions: list[StepAttention] | None = None

    def step_sets(self) -> Iterator[tuple[int, frozenset[int]]]:
        """Yield (i, S_i): the cached set after each step's transition."""
        current: set[int] = set()
        for ev in self.events:
            if ev.evicted is None:
                current.add(ev.admitted)
            elif ev.evicted != ev.admitted:
                current.discard(ev.evicted)
                current.add(ev.admitted)
            yield ev.step, frozenset(current)

    def evicted_tokens(self) -> list[int]:
        """Tokens that left the cache (refused incomings included)."""
        return [ev.evicted for ev in self.events if ev.evicted is not None]


def run_policy(
    trace: AttentionTrace,
    policy: PolicyConfig,
    record_attention: bool = True,
) -> SimulationRecord:
    """Replay the budget-constrained generative process over a trace.

    Each step computes the restricted attention over the cached set plus
    the incoming token, folds it into the accumulated scores, and lets the
    policy resolve the eviction once the cache is at budget. Deterministic:
    equal (trace, policy) inputs give equal records.
    """
    n = trace.n
    if policy.kind == "full" and policy.budget < n:
        raise BudgetExceeded(
            f"full policy needs budget >= n ({policy.budget} < {n}); nothing may be evicted"
        )
    state = CacheState(budget=policy.budget, dim=trace.d, recent_capacity=policy.recent_budget)
    scores = AccumulatedScores.empty()
    events: list[EvictionEvent] = []
    attentions: list[StepAttention] | None = [] if record_attention else None

    for i in range(1, n + 1):
        attended = sorted(state.tracked)
        attended.append(i)
        sa = masked_step(trace, i, attended)
        scores = update_scores(scores, sa)
        if not policy.init_score_from_self:
            scores = scores.zeroed(i)
        if state.at_budget:
            victim = decide(policy, scores, state, sa, i)
            if victim is None:
                raise InconsistentState(f"policy {policy.kind} returned no victim at budget")
            event = state.swap(victim, i, key=trace.key_row(i))
            scores = scores.without(victim)
        else:
            event = state.admit(i, key=trace.key_row(i))
        events.append(event)
        if attentions is not None:
            attentions.append(sa)

    return SimulationRecord(
        config=policy,
        n=n,
        events=events,
        final_tracked=state.tracked,
        final_scores=scores,
        step_attentions=attentions,
    )

"""Desk-scale measurements: sparsity, eviction damage, heavy-hitter shape.

Task accuracy needs a real model; these proxies measure what an eviction
policy actually destroys. ``retained mass`` is the fraction of a step's
full-cache attention that lands on tokens still cached; the total-variation
distance compares the restricted weights (zero-extended) against the exact
ones. A full-budget run scores retained mass 1 and TV 0 at every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .attention import exact_row, softmax_over
from .cache import QuantizationSpec
from .errors import DimensionMismatch, EmptyRow, InvalidSpec, TraceMismatch
from .policies import AccumulatedScores, PolicyConfig, SimulationRecord
from .trace import AttentionTrace


# --- attention sparsity ----------------------------------------------------

def row_sparsity(weights, threshold_frac: float) -> float:
    """Fraction of entries below ``threshold_frac * max(weights)``."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise EmptyRow("cannot measure sparsity of an empty row")
    if not 0.0 < threshold_frac < 1.0:
        raise InvalidSpec("threshold_frac must lie in (0, 1)")
    if (w < 0).any():
        raise InvalidSpec("weights must be non-negative")
    return float((w < threshold_frac * w.max()).mean())


@dataclass(frozen=True)
class SparsityReport:
    """Per-row sparsity of a trace's exact attention matrix.

    Rows are padded to full length n, so the causally masked upper triangle
    counts as sparse — matching how sparsity of a square attention map is
    usually read off.
    """

    per_row: np.ndarray
    threshold_frac: float
    head_id: int | None = None
    layer_id: int | None = None

    @property
    def mean(self) -> float:
        return float(self.per_row.mean())


def trace_sparsity(trace: AttentionTrace, threshold_frac: float = 0.01) -> SparsityReport:
    """Sparsity of each padded row of the exact attention map."""
    n = trace.n
    fracs = np.empty(n)
    for i in range(1, n + 1):
        row = np.zeros(n)
        row[:i] = exact_row(trace, i)
        fracs[i - 1] = row_sparsity(row, threshold_frac)
    return SparsityReport(
        per_row=fracs,
        threshold_frac=threshold_frac,
        head_id=trace.head_id,
        layer_id=trace.layer_id,
    )


def aggregate_sparsity(reports: Iterable[SparsityReport]) -> dict[str, dict]:
    """Mean sparsity grouped three ways: overall, per head, per layer."""
    reports = list(reports)
    if not reports:
        return {"overall": {}, "by_head": {}, "by_layer": {}}
    overall = float(np.mean([r.mean for r in reports]))
    by_head: dict = {}
    by_layer: dict = {}
    for r in reports:
        by_head.setdefault(r.head_id, []).append(r.mean)
        by_layer.setdefault(r.layer_id, []).append(r.mean)
    return {
        "overall": {"mean": overall, "reports": len(reports)},
        "by_head": {k: float(np.mean(v)) for k, v in by_head.items()},
        "by_layer": {k: float(np.mean(v)) for k, v in by_layer.items()},
    }


# --- deviation from full attention ---------------------------------------------

@dataclass(frozen=True)
class DeviationReport:
    """Per-step retained mass and TV distance of a simulated run."""

    retained: np.ndarray
    tv: np.ndarray

    @property
    def mean_retained(self) -> float:
        return float(self.retained.mean())

    @property
    def mean_tv(self) -> float:
        return float(self.tv.mean())


def retained_mass(trace: AttentionTrace, record: SimulationRecord) -> DeviationReport:
    """Compare a run's per-step cached sets against exact attention.

    For each step i with cached set S_i: retained r_i = sum of the exact
    weights over S_i, and TV_i = total-variation distance between the
    restricted softmax over S_i (extended by zeros) and the exact weights.
    """
    if record.n != trace.n:
        raise TraceMismatch(f"record has n={record.n}, trace has n={trace.n}")
    n = trace.n
    retained = np.empty(n)
    tv = np.empty(n)
    for i, tracked in record.step_sets():
        exact = exact_row(trace, i)
        idx = np.fromiter((t - 1 for t in sorted(tracked)), dtype=np.int64, count=len(tracked))
        on_cache = np.zeros(i, dtype=bool)
        on_cache[idx] = True
        # 1 - off-mass rather than sum-of-on-mass: exact 1.0 for a full cache
        off = float(exact[~on_cache].sum())
        r = 1.0 - off
        masked, _ = softmax_over(trace, i, idx + 1)
        # |masked - exact| over S, plus the exact mass that fell off-cache
        tv_i = 0.5 * (float(np.abs(masked - exact[idx]).sum()) + off)
        retained[i - 1] = r
        tv[i - 1] = tv_i
    return DeviationReport(retained=retained, tv=tv)


# --- heavy-hitter profile ---------------------------------------------------------

@dataclass(frozen=True)
class HeavyHitterProfile:
    """Accumulated-score curve with concentration statistics.

    ``curve`` is the raw accumulated score per token, sorted descending.
    Concentration shares are computed on arrival-debiased values: each
    token's accumulated score is divided by the score a perfectly uniform
    attender would have given it (sum of 1/i over the steps it was in
    view), so an early arrival alone does not register as heavy. Under
    near-uniform attention every token's debiased value is ~1 and the
    top-10% share sits near 10%.
    """

    tokens: np.ndarray
    curve: np.ndarray
    normalized: np.ndarray
    top_shares: dict[float, float]

    def share(self, frac: float) -> float:
        return self.top_shares[frac]


def heavy_hitter_profile(
    scores: AccumulatedScores | Mapping[int, float],
    total_steps: int,
    top_fracs: Sequence[float] = (0.05, 0.10, 0.20),
) -> HeavyHitterProfile:
    """Profile accumulated attention mass; intended for full-attention runs."""
    mapping = scores.scores if isinstance(scores, AccumulatedScores) else dict(scores)
    if not mapping:
        raise EmptyRow("no accumulated scores to profile")
    tokens = np.array(sorted(mapping), dtype=np.int64)
    if tokens[0] < 1 or tokens[-1] > total_steps:
        raise InvalidSpec("token indices must lie in [1, total_steps]")
    raw = np.array([mapping[t] for t in tokens])
    # expected accumulated score under uniform attention: sum_{i=t}^{n} 1/i
    harmonic = np.concatenate(([0.0], np.cumsum(1.0 / np.arange(1, total_steps + 1))))
    baseline = harmonic[total_steps] - harmonic[tokens - 1]
    normalized = raw / baseline
    order = np.argsort(-normalized, kind="stable")
    tokens_sorted = tokens[order]
    curve = raw[order]
    norm_sorted = normalized[order]
    total = float(norm_sorted.sum())
    shares: dict[float, float] = {}
    m = len(tokens_sorted)
    for frac in top_fracs:
        count = min(m, max(1, int(round(frac * m))))
        shares[frac] = float(norm_sorted[:count].sum()) / total
    shares[1.0] = float(norm_sorted.sum()) / total
    return HeavyHitterProfile(
        tokens=tokens_sorted, curve=curve, normalized=norm_sorted, top_shares=shares
    )


# --- sparse-support checks -------------------------------------------------------

@dataclass(frozen=True)
class GoodDistributionCheck:
    """Whether sampled vectors keep a fixed core support with bounded excess.

    A family of non-negative vectors is (alpha, tau, k)-good for a core set
    S_0 of size k when every vector's tau-support contains S_0 and exceeds
    it by at most alpha*k coordinates. The aggregate consequences (the core
    survives intersection; union excess is at most alpha*k*n) follow from
    the per-sample verdicts and are reported alongside them.
    """

    core: frozenset[int]
    tau: float
    alpha: float
    core_ok: tuple[bool, ...]
    excess_ok: tuple[bool, ...]
    excess_counts: tuple[int, ...]
    intersection_ok: bool
    union_excess: int
    union_ok: bool

    @property
    def k(self) -> int:
        return len(self.core)

    @property
    def all_good(self) -> bool:
        return all(self.core_ok) and all(self.excess_ok)


def support_at(vector: np.ndarray, tau: float) -> frozenset[int]:
    """1-based indices with value >= tau."""
    return frozenset(int(j) + 1 for j in np.flatnonzero(np.asarray(vector) >= tau))


def check_good_distribution(
    samples: Sequence, core: Iterable[int], tau: float, alpha: float
) -> GoodDistributionCheck:
    """Verdicts for each sample plus the aggregate union/intersection claims."""
    if tau <= 0:
        raise InvalidSpec("tau must be > 0")
    if alpha < 0:
        raise InvalidSpec("alpha must be >= 0")
    vecs = [np.asarray(s, dtype=np.float64) for s in samples]
    if not vecs:
        raise InvalidSpec("need at least one sample")
    m = vecs[0].shape[0]
    for v in vecs:
        if v.ndim != 1 or v.shape[0] != m:
            raise DimensionMismatch("samples must be 1-D vectors of equal length")
    core = frozenset(int(t) for t in core)
    if core and (min(core) < 1 or max(core) > m):
        raise InvalidSpec(f"core set must lie within [1, {m}]")
    k = len(core)
    supports = [support_at(v, tau) for v in vecs]
    core_ok = tuple(core <= s for s in supports)
    excess_counts = tuple(len(s - core) for s in supports)
    excess_ok = tuple(c <= alpha * k for c in excess_counts)
    inter = frozenset.intersection(*supports)
    union = frozenset.union(*supports)
    intersection_ok = core <= inter
    union_excess = len(union - core)
    union_ok = union_excess <= alpha * k * len(vecs)
    # aggregate claims are implied by the per-sample bullets
    if all(core_ok):
        assert intersection_ok
    if all(excess_ok):
        assert union_ok
    return GoodDistributionCheck(
        core=core,
        tau=tau,
        alpha=alpha,
        core_ok=core_ok,
        excess_ok=excess_ok,
        excess_counts=excess_counts,
        intersection_ok=intersection_ok,
        union_excess=union_excess,
        union_ok=union_ok,
    )


# --- memory accounting ---------------------------------------------------------------

@dataclass(frozen=True)
class MemoryFootprint:
    """Cache bytes for a policy versus keeping everything."""

    slot_bytes: int
    score_bytes: int
    full_bytes: int
    ratio: float

    @property
    def total_bytes(self) -> int:
        return self.slot_bytes + self.score_bytes


def memory_footprint(
    policy: PolicyConfig,
    n: int,
    d: int,
    bytes_per_scalar: int = 8,
    quantization: QuantizationSpec | None = None,
) -> MemoryFootprint:
    """Arithmetic cache accounting; ratio is budget/n."""
    if n < 1 or d < 1 or bytes_per_scalar < 1:
        raise InvalidSpec("sizes must be positive")
    k = policy.budget
    entry_bytes = quantization.bits / 8.0 if quantization is not None else float(bytes_per_scalar)
    slot_bytes = int(k * d * entry_bytes)
    score_bytes = k * bytes_per_scalar if policy.kind in ("h2o", "h2_only") else 0
    full_bytes = n * d * bytes_per_scalar
    return MemoryFootprint(
        slot_bytes=slot_bytes,
        score_bytes=score_bytes,
        full_bytes=full_bytes,
        ratio=k / n,
    )

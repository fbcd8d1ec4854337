"""Budget-constrained KV-cache decoding with pluggable eviction policies.

The library simulates transformer decode steps over recorded or synthetic
(Q, K) traces while a fixed-size cache evicts at most one token per step,
measures what each policy destroys relative to full attention, and ships an
executable verification lab for the greedy/submodular guarantees and the
softmax-regression numerics that motivate heavy-hitter caching.
"""

from .attention import StepAttention, exact_row, exact_step, masked_step
from .cache import CacheState, EvictionEvent, QuantizationSpec, events_to_jsonl, quantize_slots
from .errors import KVCacheLabError
from .metrics import (
    DeviationReport,
    GoodDistributionCheck,
    HeavyHitterProfile,
    MemoryFootprint,
    SparsityReport,
    aggregate_sparsity,
    check_good_distribution,
    heavy_hitter_profile,
    memory_footprint,
    retained_mass,
    row_sparsity,
    trace_sparsity,
)
from .policies import (
    POLICY_KINDS,
    AccumulatedScores,
    PolicyConfig,
    SimulationRecord,
    decide,
    run_policy,
    score_function,
    update_scores,
)
from .regression import (
    LossBreakdown,
    NewtonResult,
    RegressionProblem,
    check_hessian_lipschitz,
    gradient,
    hessian,
    loss,
    newton_solve,
    random_problem,
)
from .submodular import (
    GREEDY_RATIO,
    DynamicConditionReport,
    DynamicFamily,
    NoisyOracle,
    Selection,
    SubmodularInstance,
    attention_score_instance,
    brute_force_opt,
    check_dynamic_conditions,
    dynamic_opt,
    expand_sequence,
    greedy,
    robust_greedy,
    robust_greedy_floor,
)
from .trace import (
    AttentionTrace,
    SyntheticTraceSpec,
    dominant_key_trace,
    generate_trace,
    load_trace,
    save_trace,
)

__version__ = "0.1.0"

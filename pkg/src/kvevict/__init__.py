"""KV-cache eviction scoring, policies, and brute-force eviction-error oracles.

The library is organized around one head's attention state at a time:

* :mod:`kvevict.attention` — dense attention kernel with exposed intermediates
* :mod:`kvevict.cache` — per-head KV store with original-position bookkeeping
* :mod:`kvevict.saliency` — the four token-score families and accumulation
* :mod:`kvevict.oracle` — exact proxy errors, true eviction errors, recall
* :mod:`kvevict.policy` — budget/sink/recent-window eviction and presets
* :mod:`kvevict.workload` — synthetic workloads and the binary trace format
* :mod:`kvevict.cli` — the ``kvevict`` command-line harness
"""

from .attention import (
    AttentionInstance,
    DecodeStep,
    attention_output,
    compute_logits,
    decode_step,
    run_attention,
    softmax_rows,
)
from .cache import KvCache
from .errors import KvEvictError
from .oracle import (
    OracleReport,
    PruneKind,
    PruneMode,
    PruneSemantics,
    exact_eviction_error,
    fit_order,
    taylor_residual,
    topk_recall,
    topk_recall_reserved,
    true_eviction_error,
)
from .policy import (
    DecodeRecord,
    EvictionDecision,
    PolicyConfig,
    decode_evict_loop,
    pool_scores,
    prefill_decision,
    preset,
    rank_positions,
    select_retained,
)
from .saliency import (
    JointParts,
    SaliencyVector,
    ScoreAccumulator,
    Scorer,
    accumulate,
    aggregate_group,
    reconstruct_logits,
    score_attn_l1,
    score_joint,
    score_joint_parts,
    score_key,
    score_value,
)
from .workload import (
    NeedleSpec,
    TraceHeader,
    TraceTensors,
    gen_decode_stream,
    gen_needle,
    gen_random,
    read_trace,
    write_trace,
)

__version__ = "0.1.0"

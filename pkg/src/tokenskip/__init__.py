"""tokenskip: a desk-scale decoder that skips attention for redundant tokens.

Subpackages
-----------
numerics   vectors, softmax, layer norm, running statistics, seeded RNG streams
policy     layer selection, per-layer budgets, proportional threshold feedback
filtering  anchors, head-wise similarity, variance-aware fusion, skip decisions
model      toy multi-head decoder with KV cache hosting the filter
trace      NDJSON KV traces: record, read, synthesize
replay     offline policy evaluation over traces
metrics    FLOPs accounting, similarity/attention correlation, loss proxies
cli        command-line front end (generate / synth / replay / sweep / report)
"""

from .filtering import (
    FilterEngine,
    SimilarityScore,
    anchor_memory_bytes,
    fuse,
    head_similarity,
    update_anchor,
    update_anchor_mean,
)
from .metrics import FlopsLedger, FlopsModel, attention_mass_lost, correlation_entries, spearman
from .model import (
    DecodeSession,
    KVCache,
    ModelConfig,
    Weights,
    attention_forward,
    init_weights,
    load_weights,
    project_kv,
    save_weights,
)
from .numerics import RunningStat, cosine_similarity, layer_norm, softmax, substream
from .policy import (
    PruneConfig,
    layer_budgets,
    per_layer_target,
    select_layers,
    skip_ratio,
    update_threshold,
)
from .replay import ReplayResult, replay
from .reporting import StepReport
from .trace import TraceHeader, TraceRecorder, read_trace, synthesize, write_trace

__version__ = "0.1.0"

__all__ = [
    "DecodeSession", "FilterEngine", "FlopsLedger", "FlopsModel", "KVCache",
    "ModelConfig", "PruneConfig", "ReplayResult", "RunningStat", "SimilarityScore",
    "StepReport", "TraceHeader", "TraceRecorder", "Weights", "anchor_memory_bytes",
    "attention_forward", "attention_mass_lost", "correlation_entries",
    "cosine_similarity", "fuse", "head_similarity", "init_weights", "layer_budgets",
    "layer_norm", "load_weights", "per_layer_target", "project_kv", "read_trace",
    "replay", "save_weights", "select_layers", "skip_ratio", "softmax", "spearman",
    "substream", "synthesize", "update_anchor", "update_anchor_mean",
    "update_threshold", "write_trace",
]

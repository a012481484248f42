"""Cache-augmented multi-layer target attention for streaming recommendation.

A candidate item attends a user's history through a stack of target-
attention layers whose per-item intermediate outputs are frozen into an
external (user, item, depth) cache as training streams by.  Reading those
cached vectors back turns the quadratic masked-self-attention stack into a
chain of linear-cost target-attention passes, which is what makes depth
affordable; the experiment harness sweeps the resulting cache-size /
quality trade-off.
"""

from .attention import (
    AttentionLayerParams,
    EmptyKeysError,
    marm_forward,
    oracle_masked_sa,
    target_attention,
)
from .cache import CacheEntry, CacheKey, CacheStats, CacheStore, make_keys
from .config import ConfigError, ModelConfig, load_config
from .engine import Engine, EngineError, OrderingError, TrainStepReport
from .events import EventRecord, HistoryTracker, read_event_log, write_event_log
from .flops import MODE_CACHED, MODE_UNCACHED, FlopsReport, count_flops
from .gsu import SearchResult, gsu_search, overlap_matrix
from .metrics import EvalBuffer, auc, gauc, windowed_gauc
from .synth import SynthConfig, synth_stream

__all__ = [
    "AttentionLayerParams",
    "CacheEntry",
    "CacheKey",
    "CacheStats",
    "CacheStore",
    "ConfigError",
    "Engine",
    "EngineError",
    "EvalBuffer",
    "EventRecord",
    "FlopsReport",
    "HistoryTracker",
    "MODE_CACHED",
    "MODE_UNCACHED",
    "ModelConfig",
    "OrderingError",
    "SearchResult",
    "SynthConfig",
    "TrainStepReport",
    "EmptyKeysError",
    "auc",
    "count_flops",
    "gauc",
    "gsu_search",
    "load_config",
    "make_keys",
    "marm_forward",
    "oracle_masked_sa",
    "overlap_matrix",
    "read_event_log",
    "synth_stream",
    "target_attention",
    "windowed_gauc",
    "write_event_log",
]

__version__ = "0.1.0"

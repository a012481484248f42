"""Analytic FLOPs model for the attention stack.

Counts multiply-accumulate work as 2 FLOPs per scalar MAC.  Per layer with
key count n, query dim d_in, attention dim d, FFN width d_ff:

* scores          2 * n * d
* weighted sum    2 * n * d
* query project   2 * d_in * d
* FFN             2 * d * d_ff + 2 * d_ff * d

``cached_ta`` charges that once per layer: one candidate attending n keys
read from the cache.  ``uncached_msa`` charges the same per-position cost
over all n+1 positions of the one-shot causal stack, position t attending
t keys, which is what the cache replaces; it grows quadratically in n.

Deliberately excluded: softmax exp/normalize, residual adds, and the
layer-0 key-side projection of ID embeddings.  The latter is shared across
all candidates of one request and is reported separately (see
``one_time_key_prep_flops``).  Counts are exact under these formulas.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import ConfigError, ModelConfig

MODE_CACHED = "cached_ta"
MODE_UNCACHED = "uncached_msa"


@dataclass
class FlopsReport:
    layer_flops: list[int]
    total_flops: int
    mode: str


def _per_position_cost(keys: int, d_in: int, d: int, d_ff: int) -> int:
    return 2 * keys * d + 2 * keys * d + 2 * d_in * d + 2 * d * d_ff + 2 * d_ff * d


def count_flops(config: ModelConfig, mode: str) -> FlopsReport:
    if mode not in (MODE_CACHED, MODE_UNCACHED):
        raise ConfigError(f"unknown flops mode {mode!r}")
    n, d, d_ff, F = config.n, config.d, config.d_ff, config.F
    layer_flops = []
    for layer in range(config.L + 1):
        d_in = F if layer == 0 else d
        if mode == MODE_CACHED:
            cost = _per_position_cost(n, d_in, d, d_ff)
        else:
            cost = sum(_per_position_cost(t, d_in, d, d_ff) for t in range(n + 1))
        layer_flops.append(cost)
    return FlopsReport(layer_flops, sum(layer_flops), mode)


def one_time_key_prep_flops(seq_len: int, F: int, d: int) -> int:
    """Projecting the ID-embedding key side once per request: 2 * n * F * d."""
    return 2 * seq_len * F * d


def predict_batch_flops(config: ModelConfig, num_candidates: int) -> int:
    """Cost of scoring a candidate batch: per-candidate forwards plus the
    shared key preparation.  No quadratic term in n."""
    per_candidate = count_flops(config, MODE_CACHED).total_flops
    return num_candidates * per_candidate + one_time_key_prep_flops(config.n, config.F, config.d)

"""Attention kernels: single-layer target attention, the multi-layer cached
forward, a strictly-causal masked self-attention reference, and manual
backpropagation with a hard gradient stop at cache reads.

Design, in brief:

* Single head, scaled dot product.  Each layer owns one query projection
  ``w_query`` and a two-layer ReLU FFN applied with a residual connection.
  There is no layer norm and no positional signal.
* Keys double as values.  Vectors read from the cache are used raw, so the
  per-candidate cost of a cached layer is linear in the key count.  Layer 0
  consumes ID embeddings, which live in a different space (dim F) than the
  attention stack (dim d); that one layer pushes both the query and the key
  side through its ``w_query``.
* Cold start / empty key set falls back to a passthrough: the projected
  query goes straight into the FFN + residual, no attention.
* The backward pass returns exact zeros for cached key inputs.  Gradients
  flow through the query chain only; at layer 0 they also reach the raw ID
  embeddings (which are learnable).

All kernels are pure and dtype-preserving: the engine runs float32, the
gradient checks run float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class EmptyKeysError(ValueError):
    """target_attention was called with no keys; callers own the cold-start path."""


class DimensionError(ValueError):
    """Operand shapes are inconsistent with the layer parameters."""


@dataclass
class AttentionLayerParams:
    """Learnable state of one attention layer.

    Shapes: ``w_query`` is (d_in, d), the FFN is d -> d_ff -> d.  Layer 0
    has d_in = F; deeper layers have d_in = d.
    """

    w_query: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray

    @property
    def d_in(self) -> int:
        return self.w_query.shape[0]

    @property
    def d(self) -> int:
        return self.w_query.shape[1]

    @property
    def d_ff(self) -> int:
        return self.ffn_w1.shape[1]

    def validate(self) -> None:
        d = self.d
        if self.ffn_w1.shape != (d, self.d_ff):
            raise DimensionError(f"ffn_w1 shape {self.ffn_w1.shape} != ({d}, {self.d_ff})")
        if self.ffn_b1.shape != (self.d_ff,):
            raise DimensionError(f"ffn_b1 shape {self.ffn_b1.shape} != ({self.d_ff},)")
        if self.ffn_w2.shape != (self.d_ff, d):
            raise DimensionError(f"ffn_w2 shape {self.ffn_w2.shape} != ({self.d_ff}, {d})")
        if self.ffn_b2.shape != (d,):
            raise DimensionError(f"ffn_b2 shape {self.ffn_b2.shape} != ({d},)")
        for name in ("w_query", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    def param_count(self) -> int:
        return sum(
            getattr(self, name).size
            for name in ("w_query", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2")
        )


@dataclass
class LayerGrads:
    w_query: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray


def init_layer_params(
    d_in: int,
    d: int,
    d_ff: int,
    rng: np.random.Generator,
    dtype=np.float32,
    w_query_bound: float | None = None,
) -> AttentionLayerParams:
    """Layer init tuned for stability without normalization layers.

    The FFN output projection starts at zero, so at init every layer is a
    pure softmax mixture of its keys; outputs stay inside the convex hull
    of the key set and the stack cannot blow up before the FFN has learned
    anything.  ``w_query_bound`` sets the uniform init range of the query
    projection, which controls the spread of the initial attention logits
    (too small and attention starts indistinguishable from mean pooling).
    """
    if w_query_bound is None:
        w_query_bound = 1.0 / math.sqrt(d_in)
    b1 = 1.0 / math.sqrt(d)
    return AttentionLayerParams(
        w_query=rng.uniform(-w_query_bound, w_query_bound, size=(d_in, d)).astype(dtype),
        ffn_w1=rng.uniform(-b1, b1, size=(d, d_ff)).astype(dtype),
        ffn_b1=np.zeros(d_ff, dtype=dtype),
        ffn_w2=np.zeros((d_ff, d), dtype=dtype),
        ffn_b2=np.zeros(d, dtype=dtype),
    )


def zero_layer_grads(params: AttentionLayerParams) -> LayerGrads:
    return LayerGrads(
        w_query=np.zeros_like(params.w_query),
        ffn_w1=np.zeros_like(params.ffn_w1),
        ffn_b1=np.zeros_like(params.ffn_b1),
        ffn_w2=np.zeros_like(params.ffn_w2),
        ffn_b2=np.zeros_like(params.ffn_b2),
    )


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    e = np.exp(shifted)
    return e / e.sum()


@dataclass
class LayerTape:
    """Forward intermediates needed by the backward pass."""

    query: np.ndarray
    proj: np.ndarray           # query @ w_query
    keys_raw: np.ndarray | None  # pre-projection keys, layer-0 only
    keys: np.ndarray           # (m, d); m may be 0 on the passthrough path
    weights: np.ndarray | None  # softmax weights, None when m == 0
    attended: np.ndarray       # attention output (== proj when m == 0)
    hidden: np.ndarray         # post-ReLU FFN hidden
    relu_mask: np.ndarray


def layer_forward(
    query: np.ndarray,
    keys: np.ndarray,
    params: AttentionLayerParams,
    project_keys: bool = False,
) -> tuple[np.ndarray, LayerTape]:
    """One attention layer.  ``keys`` has shape (m, d), or (m, d_in) when
    ``project_keys`` is set (the layer-0 ID-embedding path).  m == 0 takes
    the passthrough branch."""
    proj = query @ params.w_query
    keys_raw = None
    if project_keys:
        keys_raw = keys
        keys = keys @ params.w_query
    m = keys.shape[0]
    if m == 0:
        weights = None
        attended = proj
    else:
        scores = (keys @ proj) / math.sqrt(params.d)
        weights = softmax(scores)
        attended = weights @ keys
    pre1 = attended @ params.ffn_w1 + params.ffn_b1
    relu_mask = pre1 > 0
    hidden = np.where(relu_mask, pre1, 0.0)
    out = attended + hidden @ params.ffn_w2 + params.ffn_b2
    tape = LayerTape(query, proj, keys_raw, keys, weights, attended, hidden, relu_mask)
    return out, tape


def layer_backward(
    tape: LayerTape,
    params: AttentionLayerParams,
    d_out: np.ndarray,
) -> tuple[LayerGrads, np.ndarray, np.ndarray | None]:
    """Backward through one layer.

    Returns (parameter grads, grad wrt the query, grad wrt raw keys).  The
    raw-key grad is only produced for the projected-key (layer 0) path;
    cached keys are constants and receive no gradient here by construction.
    """
    d_b2 = d_out
    d_hidden = d_out @ params.ffn_w2.T
    d_w2 = np.outer(tape.hidden, d_out)
    d_pre1 = np.where(tape.relu_mask, d_hidden, 0.0)
    d_b1 = d_pre1
    d_w1 = np.outer(tape.attended, d_pre1)
    d_attended = d_out + d_pre1 @ params.ffn_w1.T

    inv_sqrt_d = 1.0 / math.sqrt(params.d)
    d_keys_raw = None
    if tape.weights is None:
        d_proj = d_attended
        if tape.keys_raw is not None:
            d_keys_raw = np.zeros_like(tape.keys_raw)
    else:
        w = tape.weights
        d_w = tape.keys @ d_attended
        d_scores = w * (d_w - float(w @ d_w))
        d_proj = (tape.keys.T @ d_scores) * inv_sqrt_d
        d_keys = np.outer(w, d_attended) + np.outer(d_scores, tape.proj) * inv_sqrt_d
        if tape.keys_raw is not None:
            d_keys_raw = d_keys @ params.w_query.T
    d_w_query = np.outer(tape.query, d_proj)
    if tape.keys_raw is not None and tape.weights is not None:
        d_w_query += tape.keys_raw.T @ d_keys
    d_query = params.w_query @ d_proj
    grads = LayerGrads(d_w_query, d_w1, d_b1, d_w2, d_b2)
    return grads, d_query, d_keys_raw


def target_attention(
    query: np.ndarray,
    keys: np.ndarray | list,
    params: AttentionLayerParams,
) -> np.ndarray:
    """Attend a single query over a nonempty key set.

    ``query`` must have dim ``params.d_in``; keys must be d-dim vectors.
    Softmax weights are positive and sum to one; the output is the attended
    vector plus the FFN applied to it.
    """
    keys = np.asarray(keys)
    if keys.ndim == 1:
        keys = keys.reshape(1, -1)
    if keys.shape[0] == 0:
        raise EmptyKeysError("target_attention requires at least one key")
    query = np.asarray(query)
    if query.shape != (params.d_in,):
        raise DimensionError(
            f"query shape {query.shape} does not match d_in={params.d_in}"
        )
    if keys.shape[1] != params.d:
        raise DimensionError(
            f"keys have dim {keys.shape[1]}, expected d={params.d}"
        )
    out, _ = layer_forward(query, keys, params)
    return out


def attention_weights(
    query: np.ndarray, keys: np.ndarray, params: AttentionLayerParams
) -> np.ndarray:
    """The softmax weights target_attention would use (for tests and analysis)."""
    keys = np.asarray(keys)
    proj = np.asarray(query) @ params.w_query
    return softmax((keys @ proj) / math.sqrt(params.d))


@dataclass
class ForwardTape:
    layers: list[LayerTape]


@dataclass
class ForwardGrads:
    layers: list[LayerGrads]
    d_query: np.ndarray          # wrt the layer-0 query (target's ID embedding)
    d_id_keys: np.ndarray        # wrt the layer-0 raw ID-embedding keys, (m0, F)
    d_cached: list[np.ndarray]   # wrt each cached key matrix: exact zeros


def multi_layer_forward(
    query: np.ndarray,
    id_keys: np.ndarray,
    cached_keys: list[np.ndarray],
    params: list[AttentionLayerParams],
) -> tuple[np.ndarray, list[np.ndarray], ForwardTape]:
    """Run the full stack: layer 0 over ID embeddings, layers 1..L over the
    given cached key matrices (misses already dropped by the caller).

    Returns (final output, the L intermediate outputs of layers 0..L-1,
    tape).  With L == 0 the final output is the layer-0 output and the
    intermediate list is empty.
    """
    if len(cached_keys) != len(params) - 1:
        raise DimensionError(
            f"got {len(cached_keys)} cached rows for {len(params)} layers"
        )
    tapes = []
    out, tape = layer_forward(query, id_keys, params[0], project_keys=True)
    tapes.append(tape)
    intermediates = []
    for depth, keys in enumerate(cached_keys, start=1):
        intermediates.append(out)
        out, tape = layer_forward(out, keys, params[depth])
        tapes.append(tape)
    return out, intermediates, ForwardTape(tapes)


def multi_layer_backward(
    tape: ForwardTape,
    params: list[AttentionLayerParams],
    d_final: np.ndarray,
) -> ForwardGrads:
    """Backward through the stack.  Cached key matrices get exact zero
    gradients; only the query chain carries gradient across layers."""
    layer_grads: list[LayerGrads | None] = [None] * len(params)
    d_cached: list[np.ndarray] = []
    d_out = d_final
    for depth in range(len(params) - 1, 0, -1):
        grads, d_out, _ = layer_backward(tape.layers[depth], params[depth], d_out)
        layer_grads[depth] = grads
        d_cached.append(np.zeros_like(tape.layers[depth].keys))
    grads0, d_query, d_id_keys = layer_backward(tape.layers[0], params[0], d_out)
    layer_grads[0] = grads0
    d_cached.reverse()
    return ForwardGrads(layer_grads, d_query, d_id_keys, d_cached)


def marm_forward(
    target: np.ndarray,
    id_embeddings: np.ndarray,
    cached: list[list[np.ndarray | None]],
    params: list[AttentionLayerParams],
    cached_mask: list[list[bool]] | None = None,
    allow_empty: bool = True,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """The cached multi-layer forward over one (user, candidate) pair.

    ``cached`` holds one row per depth 1..L, index-aligned with
    ``id_embeddings`` (chronological item order).  A slot is a miss when
    ``cached_mask`` flags it (the slot's contents are then never read) or,
    without a mask, when it is None.  Missed slots are dropped from that
    layer's key set.  A fully-missed layer falls back to the query
    passthrough unless ``allow_empty`` is False.

    Returns (final output, the L intermediates the caller may write to the
    cache, one per depth).
    """
    id_embeddings = np.asarray(id_embeddings)
    if id_embeddings.ndim == 1:
        id_embeddings = id_embeddings.reshape(1, -1)
    n = id_embeddings.shape[0]
    L = len(params) - 1
    if len(cached) != L:
        raise DimensionError(f"expected {L} cached rows, got {len(cached)}")
    d = params[0].d
    key_rows = []
    for depth, row in enumerate(cached, start=1):
        if len(row) != n:
            raise DimensionError(
                f"cached row {depth} has {len(row)} slots for {n} sequence items"
            )
        if cached_mask is not None:
            present = [row[i] for i in range(n) if not cached_mask[depth - 1][i]]
        else:
            present = [v for v in row if v is not None]
        if not present and not allow_empty:
            raise EmptyKeysError(f"all slots missed at depth {depth}")
        mat = np.asarray(present) if present else np.zeros((0, d), dtype=id_embeddings.dtype)
        key_rows.append(mat)
    final, intermediates, _ = multi_layer_forward(target, id_embeddings, key_rows, params)
    return final, intermediates


def oracle_stack(
    id_embeddings: np.ndarray,
    params: list[AttentionLayerParams],
) -> np.ndarray:
    """Strictly-causal masked self-attention over the sequence alone.

    Output[i, t] is the layer-i output at position t, where position t
    attends the layer-(i-1) outputs of positions strictly before t
    (position 0 takes the passthrough).  This is the quadratic-cost
    reference the cached streaming evaluation reproduces incrementally.
    """
    E = np.asarray(id_embeddings)
    n = E.shape[0]
    out = np.zeros((len(params), n, params[0].d), dtype=E.dtype)
    prev = E
    for i, p in enumerate(params):
        project = i == 0
        for t in range(n):
            out[i, t], _ = layer_forward(prev[t], prev[:t], p, project_keys=project)
        prev = out[i]
    return out


def oracle_masked_sa(
    id_embeddings: np.ndarray,
    target: np.ndarray,
    params: list[AttentionLayerParams],
) -> np.ndarray:
    """The full reference stack with the target appended as final position.

    Returns an array of shape (L+1, n+1, d): per layer, the outputs for the
    n history positions followed by the target's output, each position
    attending only strictly-earlier positions of the previous layer.
    """
    E = np.asarray(id_embeddings)
    if E.ndim == 1:
        E = E.reshape(1, -1)
    n = E.shape[0]
    if n < 1:
        raise DimensionError("oracle_masked_sa needs at least one history item")
    stack = oracle_stack(E, params)
    out = np.zeros((len(params), n + 1, params[0].d), dtype=E.dtype)
    out[:, :n] = stack
    prev_row = E
    q = np.asarray(target)
    for i, p in enumerate(params):
        out[i, n], _ = layer_forward(q, prev_row, p, project_keys=(i == 0))
        prev_row = stack[i]
        q = out[i, n]
    return out

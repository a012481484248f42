"""Streaming trainer and server.

One engine owns the dense parameters (attention layers plus a sigmoid
head), the sparse ID-embedding tables, the per-user exposure histories, and
a handle to the external cache.  Training is per-event, chronological, one
pass: look up the cached rows, run the multi-layer forward, take one SGD
step on the query path, then write this event's intermediates to the cache
(ranking mode only; cascading reuses a ranking cache read-only).

Gradient flow: the head, every layer's parameters, the target item's
embedding, and the sequence items' embeddings (through layer 0) all update.
Vectors read from the cache are constants; the backward pass assigns them
exact zero gradient and the update rule never touches stored cache values.

Serving paths (predict_batch, retrieval_user_query) are observationally
pure: they use non-counting cache reads and compute embeddings for unknown
ids on the fly without inserting them.
"""

from __future__ import annotations

import math
import pickle
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import (
    AttentionLayerParams,
    ForwardTape,
    init_layer_params,
    layer_forward,
    multi_layer_backward,
    multi_layer_forward,
)
from .cache import CacheEntry, CacheKey, CacheStore
from .config import ConfigError, ModelConfig
from .events import EventRecord, HistoryTracker
from .flops import MODE_CACHED, count_flops
from .gsu import SearchResult, gsu_scores, gsu_search, top_k_positions

CHECKPOINT_MAGIC = b"MARMCKPT"
CHECKPOINT_VERSION = 1

_SALT_ITEMS = 1
_SALT_USERS = 2
_SALT_LAYERS = 3

# Query-projection init ranges.  ID embeddings start uniform in
# +-1/sqrt(F), so a layer-0 bound near 2 gives initial attention logits a
# usable spread instead of collapsing to mean pooling; deeper layers see
# larger (attended) inputs and need less.
W_QUERY_BOUND_ID = 2.2
W_QUERY_BOUND_DEEP = 0.8


class EngineError(RuntimeError):
    pass


class OrderingError(EngineError):
    """Event arrived out of timestamp order."""


class CheckpointError(EngineError):
    pass


@dataclass
class TrainStepReport:
    loss: float
    prediction: float
    cache_hits: int
    cache_misses: int
    flops: int


class EmbeddingTable:
    """Growable dense matrix of per-ID vectors with deterministic lazy init.

    A fresh vector is a pure function of (seed, salt, id), so reads of
    never-trained ids can be served without inserting anything.
    """

    def __init__(self, dim: int, capacity: int, seed: int, salt: int):
        self.dim = dim
        self.capacity = capacity
        self.seed = seed
        self.salt = salt
        self._index: dict[int, int] = {}
        self._data = np.zeros((min(1024, capacity), dim), dtype=np.float32)

    def __len__(self) -> int:
        return len(self._index)

    @property
    def data(self) -> np.ndarray:
        return self._data

    def _fresh_vector(self, key: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, self.salt, key]))
        bound = 1.0 / math.sqrt(self.dim)
        return rng.uniform(-bound, bound, self.dim).astype(np.float32)

    def _insert(self, key: int) -> int:
        pos = len(self._index)
        if pos >= self.capacity:
            raise EngineError(
                f"embedding table capacity {self.capacity} exceeded"
            )
        if pos >= self._data.shape[0]:
            grown = np.zeros(
                (min(self.capacity, self._data.shape[0] * 2), self.dim), dtype=np.float32
            )
            grown[: self._data.shape[0]] = self._data
            self._data = grown
        self._data[pos] = self._fresh_vector(key)
        self._index[key] = pos
        return pos

    def indices(self, keys, insert: bool = True) -> np.ndarray:
        index = self._index
        if insert:
            rows = [index.get(k) for k in keys]
            rows = [self._insert(k) if r is None else r for k, r in zip(keys, rows)]
        else:
            rows = []
            for k in keys:
                r = index.get(k)
                if r is None:
                    raise KeyError(k)
                rows.append(r)
        return np.asarray(rows, dtype=np.int64)

    def vectors(self, keys, insert: bool = True) -> np.ndarray:
        """Gathered rows; unknown keys are computed fresh when insert is off."""
        if insert:
            return self._data[self.indices(keys, insert=True)]
        out = np.empty((len(keys), self.dim), dtype=np.float32)
        for i, k in enumerate(keys):
            r = self._index.get(k)
            out[i] = self._data[r] if r is not None else self._fresh_vector(k)
        return out

    def vector(self, key: int, insert: bool = True) -> np.ndarray:
        if insert:
            r = self._index.get(key)
            if r is None:
                r = self._insert(key)
            return self._data[r]
        r = self._index.get(key)
        return self._data[r].copy() if r is not None else self._fresh_vector(key)

    def apply_grads(self, idx: np.ndarray, grads: np.ndarray, lr: float) -> None:
        np.subtract.at(self._data, idx, lr * grads)

    def element_count(self) -> int:
        return len(self._index) * self.dim

    def snapshot(self) -> dict:
        n = len(self._index)
        return {
            "dim": self.dim,
            "capacity": self.capacity,
            "seed": self.seed,
            "salt": self.salt,
            "ids": list(self._index.keys()),
            "matrix": self._data[:n].copy(),
        }

    @classmethod
    def from_snapshot(cls, snap: dict) -> "EmbeddingTable":
        table = cls(snap["dim"], snap["capacity"], snap["seed"], snap["salt"])
        ids = snap["ids"]
        matrix = np.array(snap["matrix"], dtype=np.float32)
        if len(ids):
            size = 1024
            while size < len(ids):
                size *= 2
            table._data = np.zeros((min(snap["capacity"], size), snap["dim"]), dtype=np.float32)
            table._data[: len(ids)] = matrix
            table._index = {k: i for i, k in enumerate(ids)}
        return table


class Engine:
    def __init__(self, config: ModelConfig, cache: CacheStore | None = None):
        self.config = config
        if cache is None:
            cache = CacheStore(d=config.d, n_retain=config.n_retain, depth_max=config.L)
        if cache.d != config.d:
            raise ConfigError(f"cache d={cache.d} does not match config d={config.d}")
        if cache.depth_max < config.L:
            raise ConfigError(
                f"cache depth_max={cache.depth_max} cannot serve L={config.L}"
            )
        self.cache = cache
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, _SALT_LAYERS]))
        self.layers: list[AttentionLayerParams] = []
        for layer in range(config.L + 1):
            d_in = config.F if layer == 0 else config.d
            bound = W_QUERY_BOUND_ID if layer == 0 else W_QUERY_BOUND_DEEP
            self.layers.append(
                init_layer_params(d_in, config.d, config.d_ff, rng, w_query_bound=bound)
            )
        # zero head: the first-ever prediction is exactly sigmoid(bias)
        self.head_w = np.zeros(config.d, dtype=np.float32)
        self.head_b = 0.0
        self.item_table = EmbeddingTable(
            config.F, config.embedding_table_capacity, config.seed, _SALT_ITEMS
        )
        self.user_table = EmbeddingTable(
            config.F, config.embedding_table_capacity, config.seed, _SALT_USERS
        )
        self.history = HistoryTracker(config.history_capacity)
        self.step_count = 0
        self._last_ts: dict[int, int] = {}
        self._global_last_ts = 0
        self._step_flops = count_flops(config, MODE_CACHED).total_flops

    # -- training -------------------------------------------------------

    def train_step(self, event: EventRecord, mode: str | None = None) -> TrainStepReport:
        config = self.config
        mode = config.mode if mode is None else mode
        if mode not in ("ranking", "cascading"):
            raise ConfigError(f"unknown mode {mode!r}")
        uid = event.user_id
        ts = event.timestamp
        if ts <= self._global_last_ts:
            raise OrderingError(
                f"timestamp {ts} not after stream position {self._global_last_ts}"
            )
        last = self._last_ts.get(uid)
        if last is not None and ts <= last:
            raise OrderingError(f"timestamp {ts} out of order for user {uid}")

        t_idx = self.item_table.indices((event.item_id,), insert=True)
        tvec = self.item_table.data[t_idx[0]]

        hits = misses = 0
        if config.K > 0:
            final, intermediates, tape, seq_idx, hits, misses = self._forward_gsu(uid, tvec)
        else:
            seq = self.history.exposure_seq(uid, config.n, config.sequence_filter)
            seq_idx = self.item_table.indices(seq, insert=True)
            E = self.item_table.data[seq_idx]
            cached_rows = []
            for depth in range(1, config.L + 1):
                vals = self.cache.lookup_row(uid, seq, depth)
                present = [v for v in vals if v is not None]
                row_hits = len(present)
                hits += row_hits
                misses += len(vals) - row_hits
                if present:
                    cached_rows.append(np.asarray(present))
                else:
                    cached_rows.append(np.zeros((0, config.d), dtype=np.float32))
            final, intermediates, tape = multi_layer_forward(tvec, E, cached_rows, self.layers)

        logit = float(final @ self.head_w) + self.head_b
        prediction = _sigmoid(logit)
        label = event.label
        loss = _bce(prediction, label)

        lr = config.learning_rate
        if lr > 0.0:
            d_logit = prediction - label
            g_final = (d_logit * self.head_w).astype(final.dtype)
            grads = multi_layer_backward(tape, self.layers, g_final)
            self.head_w -= (lr * d_logit) * final
            self.head_b -= lr * d_logit
            for params, lg in zip(self.layers, grads.layers):
                params.w_query -= lr * lg.w_query
                params.ffn_w1 -= lr * lg.ffn_w1
                params.ffn_b1 -= lr * lg.ffn_b1
                params.ffn_w2 -= lr * lg.ffn_w2
                params.ffn_b2 -= lr * lg.ffn_b2
            all_idx = np.concatenate((seq_idx, t_idx))
            all_g = np.concatenate((grads.d_id_keys, grads.d_query.reshape(1, -1)))
            self.item_table.apply_grads(all_idx, all_g, lr)

        if mode == "ranking" and config.L > 0:
            entries = [
                CacheEntry(
                    key=CacheKey(uid, event.item_id, depth),
                    value=intermediates[depth - 1],
                    written_at=ts,
                )
                for depth in range(1, config.L + 1)
            ]
            self.cache.save_batch(entries)

        self.history.consume(event)
        self._last_ts[uid] = ts
        self._global_last_ts = ts
        self.step_count += 1
        return TrainStepReport(
            loss=loss,
            prediction=prediction,
            cache_hits=hits,
            cache_misses=misses,
            flops=self._step_flops,
        )

    def _forward_gsu(self, uid: int, tvec: np.ndarray):
        """Search-then-attend forward: each layer attends the top-K of the
        user's long history under that layer's own scoring.  Returns the
        tape plus the index array of the layer-0 selected items (those are
        the only embeddings that receive gradient)."""
        config = self.config
        long_seq = self.history.exposure_seq(
            uid, config.gsu_candidates, config.sequence_filter
        )
        long_idx = self.item_table.indices(long_seq, insert=True)
        E_long = self.item_table.data[long_idx]
        hits = misses = 0

        w0 = self.layers[0].w_query
        proj_keys = E_long @ w0
        scores0 = (proj_keys @ (tvec @ w0)) / math.sqrt(config.d)
        sel0 = top_k_positions(scores0, config.K)
        out, tape0 = layer_forward(tvec, E_long[sel0], self.layers[0], project_keys=True)
        tapes = [tape0]
        intermediates = []
        for depth in range(1, config.L + 1):
            intermediates.append(out)
            vals = self.cache.lookup_row(uid, long_seq, depth)
            present = [v for v in vals if v is not None]
            hits += len(present)
            misses += len(vals) - len(present)
            if present:
                cand = np.asarray(present)
                scores = gsu_scores(out, cand, self.layers[depth])
                sel = top_k_positions(scores, config.K)
                keys = cand[sel]
            else:
                keys = np.zeros((0, config.d), dtype=np.float32)
            out, tape = layer_forward(out, keys, self.layers[depth])
            tapes.append(tape)
        return out, intermediates, ForwardTape(tapes), long_idx[sel0], hits, misses

    # -- serving ----------------------------------------------------------

    def _serving_keys(self, uid: int, window: int) -> tuple[list[int], list[np.ndarray]]:
        """Sequence ids and per-depth key matrices via non-counting reads."""
        config = self.config
        seq = self.history.exposure_seq(uid, window, config.sequence_filter)
        rows = []
        for depth in range(1, config.L + 1):
            vals = self.cache.peek_row(uid, seq, depth)
            present = [v for v in vals if v is not None]
            rows.append(
                np.asarray(present) if present else np.zeros((0, config.d), dtype=np.float32)
            )
        return seq, rows

    def _forward_batch(
        self, queries: np.ndarray, id_keys: np.ndarray, cached_rows: list[np.ndarray]
    ) -> np.ndarray:
        """Vectorized multi-layer forward for a batch of layer-0 queries
        sharing one key set.  Returns the final layer outputs, (c, d)."""
        inv = 1.0 / math.sqrt(self.config.d)
        out = None
        for depth, params in enumerate(self.layers):
            if depth == 0:
                proj = queries @ params.w_query
                keys = id_keys @ params.w_query
            else:
                proj = out @ params.w_query
                keys = cached_rows[depth - 1]
            if keys.shape[0] == 0:
                attended = proj
            else:
                scores = (proj @ keys.T) * inv
                scores -= scores.max(axis=1, keepdims=True)
                np.exp(scores, out=scores)
                scores /= scores.sum(axis=1, keepdims=True)
                attended = scores @ keys
            pre = attended @ params.ffn_w1 + params.ffn_b1
            np.maximum(pre, 0.0, out=pre)
            out = attended + pre @ params.ffn_w2 + params.ffn_b2
        return out

    def predict_batch(self, user_id: int, candidates: list[int]) -> list[float]:
        """Probabilities for each candidate item, order aligned.

        The sequence and cache rows are fetched once and shared across the
        batch; per-candidate cost is one cached multi-layer pass.  No state
        is mutated: unknown ids are embedded on the fly, cache reads bypass
        the hit/miss counters, nothing is written.
        """
        if not candidates:
            return []
        seq, cached_rows = self._serving_keys(user_id, self.config.n)
        id_keys = self.item_table.vectors(seq, insert=False)
        queries = self.item_table.vectors(candidates, insert=False)
        final = self._forward_batch(queries, id_keys, cached_rows)
        logits = final @ self.head_w + self.head_b
        return [float(p) for p in 1.0 / (1.0 + np.exp(-logits))]

    def retrieval_user_query(self, user_id: int, m: int = 200) -> np.ndarray:
        """User-interest vector: the cached multi-layer pass with the user's
        own ID embedding as the layer-0 query over their latest m items.
        Read-only; empty history degrades to the passthrough of the user
        embedding."""
        seq, cached_rows = self._serving_keys(user_id, m)
        id_keys = self.item_table.vectors(seq, insert=False)
        query = self.user_table.vector(user_id, insert=False)
        final = self._forward_batch(query.reshape(1, -1), id_keys, cached_rows)
        return final[0]

    def gsu_layer_results(self, user_id: int, target_item: int) -> list[SearchResult]:
        """Per-layer search results for one (user, candidate) pair, for
        overlap analysis.  Read-only."""
        config = self.config
        if config.K <= 0:
            raise ConfigError("GSU is disabled (K=0)")
        long_seq = self.history.exposure_seq(
            user_id, config.gsu_candidates, config.sequence_filter
        )
        tvec = self.item_table.vector(target_item, insert=False)
        id_keys = self.item_table.vectors(long_seq, insert=False)
        results = []
        w0 = self.layers[0].w_query
        candidates0 = list(zip(long_seq, id_keys @ w0))
        res = gsu_search(tvec, candidates0, config.K, self.layers[0], layer=0)
        results.append(res)
        out, _ = layer_forward(
            tvec,
            id_keys[np.asarray(res.positions, dtype=np.int64)]
            if res.positions
            else np.zeros((0, config.F), dtype=np.float32),
            self.layers[0],
            project_keys=True,
        )
        for depth in range(1, config.L + 1):
            vals = self.cache.peek_row(user_id, long_seq, depth)
            cand = [(iid, v) for iid, v in zip(long_seq, vals) if v is not None]
            res = gsu_search(out, cand, config.K, self.layers[depth], layer=depth)
            results.append(res)
            if res.positions:
                keys = np.asarray([cand[i][1] for i in res.positions])
            else:
                keys = np.zeros((0, config.d), dtype=np.float32)
            out, _ = layer_forward(out, keys, self.layers[depth])
        return results

    # -- bookkeeping ------------------------------------------------------

    def param_counts(self) -> dict[str, int]:
        dense = sum(p.param_count() for p in self.layers) + self.head_w.size + 1
        sparse = self.item_table.element_count() + self.user_table.element_count()
        return {"sparse": sparse, "dense": dense}

    def state_payload(self) -> dict:
        from dataclasses import asdict

        return {
            "config": asdict(self.config),
            "step_count": self.step_count,
            "last_ts": dict(self._last_ts),
            "global_last_ts": self._global_last_ts,
            "layers": [
                {
                    "w_query": p.w_query.copy(),
                    "ffn_w1": p.ffn_w1.copy(),
                    "ffn_b1": p.ffn_b1.copy(),
                    "ffn_w2": p.ffn_w2.copy(),
                    "ffn_b2": p.ffn_b2.copy(),
                }
                for p in self.layers
            ],
            "head_w": self.head_w.copy(),
            "head_b": float(self.head_b),
            "item_table": self.item_table.snapshot(),
            "user_table": self.user_table.snapshot(),
            "history": self.history.snapshot(),
        }

    def checkpoint_bytes(self) -> bytes:
        payload = pickle.dumps(self.state_payload(), protocol=4)
        return CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION) + payload

    def checkpoint(self, path: str | Path) -> None:
        """Model-state checkpoint.  The cache persists separately through
        CacheStore.persist."""
        Path(path).write_bytes(self.checkpoint_bytes())

    @classmethod
    def restore(cls, path: str | Path, cache: CacheStore | None = None) -> "Engine":
        data = Path(path).read_bytes()
        if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic in {path}")
        (version,) = struct.unpack_from("<H", data, len(CHECKPOINT_MAGIC))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        payload = pickle.loads(data[len(CHECKPOINT_MAGIC) + 2 :])
        config = ModelConfig(**payload["config"])
        engine = cls(config, cache=cache)
        engine.step_count = payload["step_count"]
        engine._last_ts = dict(payload["last_ts"])
        engine._global_last_ts = payload["global_last_ts"]
        # np.array with an explicit dtype rebinds to the canonical float32
        # dtype object; unpickled arrays carry a distinct instance, which
        # would otherwise leak into the next checkpoint's pickle bytes
        for params, saved in zip(engine.layers, payload["layers"]):
            params.w_query = np.array(saved["w_query"], dtype=np.float32)
            params.ffn_w1 = np.array(saved["ffn_w1"], dtype=np.float32)
            params.ffn_b1 = np.array(saved["ffn_b1"], dtype=np.float32)
            params.ffn_w2 = np.array(saved["ffn_w2"], dtype=np.float32)
            params.ffn_b2 = np.array(saved["ffn_b2"], dtype=np.float32)
        engine.head_w = np.array(payload["head_w"], dtype=np.float32)
        engine.head_b = payload["head_b"]
        engine.item_table = EmbeddingTable.from_snapshot(payload["item_table"])
        engine.user_table = EmbeddingTable.from_snapshot(payload["user_table"])
        engine.history = HistoryTracker.from_snapshot(payload["history"])
        return engine


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


_EPS = 1e-7


def _bce(p: float, label: int) -> float:
    p = min(max(p, _EPS), 1.0 - _EPS)
    return -math.log(p) if label else -math.log(1.0 - p)

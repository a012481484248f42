"""Per-layer top-K search over long histories (the search-unit extension).

Scoring reuses the ranking layers' own parameters: a candidate's score is
the exact pre-softmax attention logit (w_query . query) . key / sqrt(d), so
attending the searched subset is identical to target attention restricted
to those keys.  Search is exact (full scan); ties break toward recency,
newer first.  Candidate lists arrive oldest first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionLayerParams


@dataclass
class SearchResult:
    layer: int
    items: list[tuple[int, float]]  # (item_id, score), best first
    positions: list[int]  # indices into the candidate list, parallel to items
    source_len: int
    short: bool  # fewer than K candidates were available

    def item_ids(self) -> list[int]:
        return [item_id for item_id, _ in self.items]


def gsu_scores(
    query_vec: np.ndarray,
    candidate_matrix: np.ndarray,
    layer_params: AttentionLayerParams,
) -> np.ndarray:
    proj = np.asarray(query_vec) @ layer_params.w_query
    return (candidate_matrix @ proj) / math.sqrt(layer_params.d)


def top_k_positions(scores: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k highest scores, best first; equal scores rank the
    later (more recent) position first."""
    m = scores.shape[0]
    positions = np.arange(m)
    order = np.lexsort((-positions, -scores))
    return order[: min(k, m)]


def gsu_search(
    query_vec: np.ndarray,
    candidates: list[tuple[int, np.ndarray]],
    k: int,
    layer_params: AttentionLayerParams,
    layer: int = 0,
) -> SearchResult:
    """Top-k candidates by attention logit under ``layer_params``.

    ``candidates`` are (item_id, key_vector) pairs in chronological order;
    key vectors must already live in the layer's key space (for layer 0
    the caller passes projected ID embeddings).  Returns all candidates,
    flagged short, when fewer than k exist.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    source_len = len(candidates)
    if source_len == 0:
        return SearchResult(layer=layer, items=[], positions=[], source_len=0, short=True)
    matrix = np.asarray([vec for _, vec in candidates])
    scores = gsu_scores(query_vec, matrix, layer_params)
    take = top_k_positions(scores, k)
    items = [(candidates[i][0], float(scores[i])) for i in take]
    return SearchResult(
        layer=layer,
        items=items,
        positions=[int(i) for i in take],
        source_len=source_len,
        short=source_len < k,
    )


def overlap_matrix(results: list[SearchResult]) -> np.ndarray:
    """Pairwise overlap of searched item sets across layers.

    Entry (i, j) is |items_i intersect items_j| divided by the smaller of
    the two result sizes (equal to K when all layers returned K).  The
    diagonal is 1.0 and the matrix symmetric.
    """
    n = len(results)
    sets = [set(r.item_ids()) for r in results]
    out = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        out[i, i] = 1.0
        for j in range(i + 1, n):
            denom = min(len(sets[i]), len(sets[j]))
            value = len(sets[i] & sets[j]) / denom if denom else 0.0
            out[i, j] = value
            out[j, i] = value
    return out

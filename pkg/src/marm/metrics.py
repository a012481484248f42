"""Ranking metrics: AUC, per-user weighted GAUC, and streaming windows.

AUC is the Mann-Whitney rank statistic, P(score_pos > score_neg) plus half
the tie probability.  It is undefined (None) when a class is absent.  GAUC
weights each user's AUC by their share of samples; users whose window holds
a single class are excluded and the weights renormalized over the rest.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Iterable, Sequence

import numpy as np


def auc(pairs: Iterable[tuple[float, int]]) -> float | None:
    """Rank-statistic AUC over (score, label) pairs; None if one-class."""
    pairs = list(pairs)
    if not pairs:
        return None
    scores = np.asarray([p[0] for p in pairs], dtype=np.float64)
    labels = np.asarray([p[1] for p in pairs], dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(labels.size, dtype=np.float64)
    i = 0
    while i < labels.size:
        j = i
        while j + 1 < labels.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # midrank for the tie group spanning sorted positions i..j (1-based ranks)
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = float(ranks[labels == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


class EvalBuffer:
    """Per-user (prediction, label) accumulation with event-count windows."""

    def __init__(self):
        self.records: list[tuple[int, float, int]] = []

    def add(self, user_id: int, prediction: float, label: int) -> None:
        if not 0.0 <= prediction <= 1.0:
            raise ValueError(f"prediction {prediction} outside [0, 1]")
        if label not in (0, 1):
            raise ValueError(f"label must be binary, got {label}")
        self.records.append((user_id, prediction, label))

    def __len__(self) -> int:
        return len(self.records)

    def per_user(self) -> dict[int, list[tuple[float, int]]]:
        by_user: dict[int, list[tuple[float, int]]] = defaultdict(list)
        for uid, pred, label in self.records:
            by_user[uid].append((pred, label))
        return dict(by_user)

    def window(self, start: int, stop: int) -> "EvalBuffer":
        sub = EvalBuffer()
        sub.records = self.records[start:stop]
        return sub


def gauc(buffer: EvalBuffer) -> float:
    """Sample-count-weighted mean of per-user AUCs, renormalized over users
    whose AUC is defined.  Raises when no user qualifies."""
    total = 0.0
    weight = 0.0
    for pairs in buffer.per_user().values():
        user_auc = auc(pairs)
        if user_auc is None:
            continue
        total += len(pairs) * user_auc
        weight += len(pairs)
    if weight == 0.0:
        raise ValueError("GAUC undefined: every user's window is single-class")
    return total / weight


def windowed_gauc(buffer: EvalBuffer, window: int, segments: int) -> float:
    """Mean GAUC over ``segments`` disjoint sub-windows of the final
    ``window`` records (the streaming analogue of last-day evaluation).
    Sub-windows where GAUC is undefined are skipped."""
    if window < 1 or segments < 1:
        raise ValueError("window and segments must be >= 1")
    n = len(buffer)
    window = min(window, n)
    start = n - window
    seg_len = window // segments
    if seg_len == 0:
        segments, seg_len = 1, window
    values = []
    for s in range(segments):
        lo = start + s * seg_len
        hi = start + (s + 1) * seg_len if s < segments - 1 else n
        try:
            values.append(gauc(buffer.window(lo, hi)))
        except ValueError:
            continue
    if not values:
        raise ValueError("GAUC undefined in every sub-window")
    return float(np.mean(values))


def window_mean(values: Sequence[float], window: int) -> float:
    """Mean of the trailing window (streaming loss reporting)."""
    if not values:
        raise ValueError("no values")
    window = min(window, len(values))
    return float(np.mean(np.asarray(values[-window:], dtype=np.float64)))

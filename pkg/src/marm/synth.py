"""Synthetic streaming data with planted sequential structure.

Each user carries a hidden Markov interest state over item clusters (slow
transitions: dwell times of about 1/(1 - persistence) of that user's
events) plus a static taste profile (a Dirichlet draw).  Exposures mix the
state's cluster, a taste draw, and uniform noise, so the exposure stream
itself leaks the state.  The long-view label fires with probability

    clip(base + match_gain * [cluster == state]
              + quality_gain * cluster/(K-1)
              + taste_gain * taste[cluster], label_min, label_max)

The match term is the planted sequential signal: predicting it requires
estimating the user's current state from their recent exposures, and that
estimate improves smoothly with how much history the model can effectively
attend (longer windows, and deeper stacks whose cached summaries extend
the receptive field past the window).  The quality ramp is a globally
learnable floor; the taste term adds per-user palette variety.  Items are
never exposed twice to the same user, matching the streaming-recsys
setting the engine assumes.

Cluster assignments and per-user latents stay inside the generator; the
model only ever sees ids and labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .config import ConfigError
from .events import EventRecord


@dataclass
class SynthConfig:
    users: int = 500
    n_clusters: int = 6
    items_per_cluster: int = 200
    events: int = 200_000
    transition: np.ndarray | None = None  # rows sum to 1; default built from persistence
    persistence: float = 0.9933  # dwell ~150 of a user's events
    p_state_item: float = 0.5  # exposure draws: state cluster
    p_taste_item: float = 0.2  # exposure draws: taste profile (rest uniform)
    taste_alpha: float = 1.0
    label_base: float = 0.10
    label_match_gain: float = 0.35
    label_quality_gain: float = 0.12  # global ramp across cluster ids
    label_taste_gain: float = 0.10
    label_min: float = 0.02
    label_max: float = 0.95

    def __post_init__(self) -> None:
        if self.users < 1:
            raise ConfigError("users must be >= 1")
        if self.n_clusters < 2:
            raise ConfigError("need at least 2 item clusters")
        if self.items_per_cluster < 1:
            raise ConfigError("items_per_cluster must be >= 1")
        if self.events < 1:
            raise ConfigError("events must be >= 1")
        if not 0.0 <= self.persistence <= 1.0:
            raise ConfigError("persistence must be in [0, 1]")
        if self.p_state_item + self.p_taste_item > 1.0:
            raise ConfigError("p_state_item + p_taste_item must be <= 1")
        if self.transition is not None:
            t = np.asarray(self.transition, dtype=np.float64)
            k = self.n_clusters
            if t.shape != (k, k):
                raise ConfigError(f"transition must be {k}x{k}, got {t.shape}")
            if np.any(t < 0) or not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
                raise ConfigError("transition rows must be nonnegative and sum to 1")
            self.transition = t

    def transition_matrix(self) -> np.ndarray:
        if self.transition is not None:
            return self.transition
        k = self.n_clusters
        off = (1.0 - self.persistence) / (k - 1)
        t = np.full((k, k), off)
        np.fill_diagonal(t, self.persistence)
        return t


def item_cluster(item_id: int, n_clusters: int) -> int:
    """Deterministic cluster assignment by id; hidden from the model."""
    return item_id % n_clusters


@dataclass
class _UserState:
    state: int
    taste: np.ndarray
    next_slot: np.ndarray  # per-cluster cursor into that user's unexposed items
    orders: list  # per-cluster exposure order, one permutation each


def synth_stream(config: SynthConfig, seed: int) -> Iterator[EventRecord]:
    """Deterministic event stream for a seed.  Timestamps count from 1."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    k = config.n_clusters
    trans = config.transition_matrix()
    trans_cum = np.cumsum(trans, axis=1)

    # Each user consumes a cluster's items in a per-user shuffled order,
    # which guarantees no repeat exposure without tracking seen-sets.
    cluster_items = []
    for c in range(k):
        ids = np.arange(config.items_per_cluster, dtype=np.int64) * k + c
        cluster_items.append(ids)

    states: dict[int, _UserState] = {}

    def get_user(uid: int) -> _UserState:
        st = states.get(uid)
        if st is None:
            taste = rng.dirichlet(np.full(k, config.taste_alpha))
            state = int(rng.integers(k))
            orders = [rng.permutation(config.items_per_cluster) for _ in range(k)]
            st = _UserState(
                state=state, taste=taste,
                next_slot=np.zeros(k, dtype=np.int64), orders=orders,
            )
            states[uid] = st
        return st

    timestamp = 0
    for _ in range(config.events):
        uid = int(rng.integers(config.users))
        st = get_user(uid)
        # advance hidden state
        u = rng.random()
        st.state = int(np.searchsorted(trans_cum[st.state], u, side="right"))
        if st.state >= k:  # guard against fp edge at u == 1.0
            st.state = k - 1
        # choose exposure cluster
        r = rng.random()
        if r < config.p_state_item:
            c = st.state
        elif r < config.p_state_item + config.p_taste_item:
            c = int(np.searchsorted(np.cumsum(st.taste), rng.random(), side="right"))
            c = min(c, k - 1)
        else:
            c = int(rng.integers(k))
        # pick an unexposed item from cluster c, falling back to any cluster
        # with stock left
        chosen = None
        for probe in range(k):
            cc = (c + probe) % k
            slot = st.next_slot[cc]
            if slot < config.items_per_cluster:
                chosen = int(cluster_items[cc][st.orders[cc][slot]])
                st.next_slot[cc] = slot + 1
                c = cc
                break
        if chosen is None:
            raise ConfigError(
                "item pool exhausted; increase items_per_cluster relative to events/users"
            )
        p = config.label_base
        if c == st.state:
            p += config.label_match_gain
        p += config.label_quality_gain * c / (k - 1)
        p += config.label_taste_gain * float(st.taste[c])
        p = min(max(p, config.label_min), config.label_max)
        label = int(rng.random() < p)
        timestamp += 1
        yield EventRecord(
            user_id=uid, item_id=chosen, label=label, timestamp=timestamp, item_cluster=c
        )

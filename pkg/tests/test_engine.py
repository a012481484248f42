"""Engine behaviour: cold start, mode semantics, serving purity, gradient
stop at the cache boundary, checkpointing, determinism."""

import math
import pickle

import numpy as np
import pytest

from marm.cache import CacheKey, CacheStore
from marm.config import ConfigError, ModelConfig
from marm.engine import EmbeddingTable, Engine, EngineError, OrderingError
from marm.events import EventRecord
from marm.synth import SynthConfig, synth_stream


def ev(uid, item, label, ts):
    return EventRecord(user_id=uid, item_id=item, label=label, timestamp=ts)


def small_config(**kw):
    base = dict(L=2, n=8, d=6, F=5, seed=3, learning_rate=0.05)
    base.update(kw)
    return ModelConfig(**base)


def engine_state_bytes(engine):
    return pickle.dumps(engine.state_payload(), protocol=4) + engine.cache.to_bytes()


def feed(engine, events):
    return [engine.train_step(e) for e in events]


def stream_events(count, users=3, seed=0, start_ts=1, item_base=1000):
    rng = np.random.default_rng(seed)
    out = []
    for t in range(count):
        uid = t % users
        out.append(ev(uid, item_base + t, int(rng.random() < 0.5), start_ts + t))
    return out


# -- train_step basics -------------------------------------------------------

def test_first_event_cold_start_contract():
    engine = Engine(small_config())
    report = engine.train_step(ev(1, 500, 1, 1))
    # zero-init head: the very first prediction is sigmoid(bias) = 0.5
    assert report.prediction == pytest.approx(0.5)
    assert report.loss == pytest.approx(-math.log(0.5), rel=1e-6)
    assert len(engine.cache) == engine.config.L
    assert report.cache_hits == 0 and report.cache_misses == 0


def test_ranking_mode_writes_L_per_step():
    config = small_config(L=3)
    engine = Engine(config)
    events = stream_events(40)
    feed(engine, events)
    accepted = len(engine.cache) + engine.cache.evictions
    assert accepted == 40 * 3
    assert engine.cache.rejected == 0  # unique items per user


def test_cascading_mode_never_writes():
    ranking = Engine(small_config())
    feed(ranking, stream_events(60))
    shared = ranking.cache
    before = shared.to_bytes()
    casc = Engine(small_config(mode="cascading"), cache=shared)
    reports = feed(casc, stream_events(50, seed=9, start_ts=1000))
    assert shared.to_bytes()[:8] == before[:8]
    assert len(shared) + shared.evictions == 60 * 2  # only ranking's writes
    assert any(r.cache_hits + r.cache_misses > 0 for r in reports)


def test_out_of_order_rejected_per_user_and_globally():
    engine = Engine(small_config())
    engine.train_step(ev(1, 10, 1, 5))
    with pytest.raises(OrderingError):
        engine.train_step(ev(1, 11, 1, 5))
    with pytest.raises(OrderingError):
        engine.train_step(ev(2, 12, 1, 4))
    engine.train_step(ev(2, 12, 1, 6))


def test_frozen_train_step_prediction_matches_predict_batch():
    engine = Engine(small_config(learning_rate=0.0))
    feed(engine, stream_events(30))
    nxt = ev(0, 7777, 1, 100)
    expected = engine.predict_batch(0, [7777])[0]
    report = engine.train_step(nxt)
    assert report.prediction == pytest.approx(expected, rel=1e-6)


def test_gradient_stop_cache_values_frozen_under_training():
    engine = Engine(small_config())
    feed(engine, stream_events(30))
    snapshot = {
        k: (v.copy(), w) for k, (v, w) in engine.cache._values.items()
    }
    feed(engine, stream_events(30, seed=5, start_ts=500, item_base=5000))
    for k, (value, written_at) in snapshot.items():
        if k not in engine.cache._values:
            continue  # evicted by the window, never rewritten in place
        now_value, now_written = engine.cache._values[k]
        assert now_written == written_at
        np.testing.assert_array_equal(now_value, value)


def test_forward_depends_on_cache_contents():
    a = Engine(small_config(learning_rate=0.0))
    b = Engine(small_config(learning_rate=0.0))
    events = stream_events(24)
    feed(a, events)
    feed(b, events)
    # perturb one of b's stored vectors; the next prediction must move
    key = next(iter(b.cache._values))
    b.cache._values[key][0][0] += 0.25
    probe_a = a.predict_batch(key[0], [4242])[0]
    probe_b = b.predict_batch(key[0], [4242])[0]
    assert probe_a != probe_b


def test_chronological_consistency_of_cache_rows():
    class Probe(CacheStore):
        def __init__(self, *a, **kw):
            super().__init__(*a, **kw)
            self.current_ts = None

        def lookup_row(self, user_id, item_ids, depth):
            out = super().lookup_row(user_id, item_ids, depth)
            for item_id, value in zip(item_ids, out):
                if value is not None:
                    w = self.written_at(CacheKey(user_id, item_id, depth))
                    assert w is not None and w < self.current_ts
            return out

    config = small_config()
    probe = Probe(d=config.d, n_retain=config.n_retain, depth_max=config.L)
    engine = Engine(config, cache=probe)
    for e in stream_events(60):
        probe.current_ts = e.timestamp
        engine.train_step(e)


# -- serving -----------------------------------------------------------------

def test_duplicate_candidates_identical_probabilities():
    engine = Engine(small_config())
    feed(engine, stream_events(40))
    p = engine.predict_batch(0, [123, 123])
    assert p[0] == p[1]


def test_batch_equals_singletons():
    engine = Engine(small_config())
    feed(engine, stream_events(40))
    candidates = [5, 900, 17, 1001]
    batch = engine.predict_batch(1, candidates)
    singles = [engine.predict_batch(1, [c])[0] for c in candidates]
    assert batch == pytest.approx(singles, rel=1e-6)


def test_predict_batch_is_observationally_pure():
    engine = Engine(small_config())
    feed(engine, stream_events(50))
    before = engine_state_bytes(engine)
    engine.predict_batch(0, [999_999, 5, 42])
    engine.predict_batch(12345, [1])  # unknown user, cold path
    engine.retrieval_user_query(0)
    engine.retrieval_user_query(777)
    after = engine_state_bytes(engine)
    assert before == after


def test_retrieval_empty_history_is_user_embedding_passthrough():
    engine = Engine(small_config())
    out1 = engine.retrieval_user_query(31337)
    out2 = engine.retrieval_user_query(31337)
    np.testing.assert_array_equal(out1, out2)
    assert out1.shape == (engine.config.d,)


def test_retrieval_matches_phantom_candidate():
    config = small_config()
    engine = Engine(config)
    feed(engine, stream_events(40))
    uid = 0
    user_vec = engine.user_table.vector(uid, insert=False)
    phantom = 888_888
    idx = engine.item_table.indices((phantom,), insert=True)[0]
    engine.item_table.data[idx] = user_vec
    expected_prob = engine.predict_batch(uid, [phantom])[0]
    out = engine.retrieval_user_query(uid, m=config.n)
    logit = float(out @ engine.head_w) + engine.head_b
    assert 1.0 / (1.0 + math.exp(-logit)) == pytest.approx(expected_prob, rel=1e-6)


# -- embeddings ---------------------------------------------------------------

def test_lazy_embeddings_deterministic_and_salted():
    a = EmbeddingTable(dim=8, capacity=100, seed=4, salt=1)
    b = EmbeddingTable(dim=8, capacity=100, seed=4, salt=1)
    np.testing.assert_array_equal(a.vector(77), b.vector(77, insert=False))
    c = EmbeddingTable(dim=8, capacity=100, seed=4, salt=2)
    assert not np.array_equal(a.vector(77, insert=False), c.vector(77, insert=False))
    bound = 1.0 / math.sqrt(8)
    v = a.vector(123456)
    assert np.all(np.abs(v) <= bound)


def test_embedding_capacity_enforced():
    engine = Engine(small_config(embedding_table_capacity=5))
    with pytest.raises(EngineError):
        feed(engine, stream_events(20))


def test_sparse_grows_dense_constant():
    engine = Engine(small_config())
    feed(engine, stream_events(20))
    first = engine.param_counts()
    feed(engine, stream_events(20, seed=2, start_ts=300, item_base=9000))
    second = engine.param_counts()
    assert second["dense"] == first["dense"]
    assert second["sparse"] > first["sparse"]
    expected_dense = sum(p.param_count() for p in engine.layers) + engine.config.d + 1
    assert first["dense"] == expected_dense


# -- checkpointing ------------------------------------------------------------

def test_checkpoint_roundtrip_identical_next_step(tmp_path):
    engine = Engine(small_config())
    feed(engine, stream_events(50))
    path = tmp_path / "model.ckpt"
    cache_path = tmp_path / "cache.bin"
    engine.checkpoint(path)
    engine.cache.persist(cache_path)
    restored = Engine.restore(path, cache=CacheStore.load(cache_path))
    nxt = ev(0, 31415, 1, 999)
    r1 = engine.train_step(nxt)
    r2 = restored.train_step(nxt)
    assert r1 == r2
    assert engine_state_bytes(engine) == engine_state_bytes(restored)


def test_checkpoint_restore_checkpoint_bytes_stable(tmp_path):
    engine = Engine(small_config())
    feed(engine, stream_events(30))
    path = tmp_path / "model.ckpt"
    engine.checkpoint(path)
    restored = Engine.restore(path)
    assert restored.checkpoint_bytes() == engine.checkpoint_bytes()


def test_checkpoint_train_continue_vs_restore_continue(tmp_path):
    sc = SynthConfig(users=10, events=600, items_per_cluster=150)
    events = list(synth_stream(sc, 1))
    a = Engine(small_config())
    for e in events[:300]:
        a.train_step(e)
    path = tmp_path / "model.ckpt"
    cache_path = tmp_path / "cache.bin"
    a.checkpoint(path)
    a.cache.persist(cache_path)
    losses_a = [a.train_step(e).loss for e in events[300:]]
    b = Engine.restore(path, cache=CacheStore.load(cache_path))
    losses_b = [b.train_step(e).loss for e in events[300:]]
    assert losses_a == losses_b
    assert engine_state_bytes(a) == engine_state_bytes(b)


def test_checkpoint_bad_magic_and_version(tmp_path):
    engine = Engine(small_config())
    path = tmp_path / "model.ckpt"
    engine.checkpoint(path)
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(EngineError):
        Engine.restore(bad)
    raw = bytearray(path.read_bytes())
    raw[len(b"MARMCKPT")] = 0xEE
    bad.write_bytes(bytes(raw))
    with pytest.raises(EngineError):
        Engine.restore(bad)


# -- determinism ---------------------------------------------------------------

def test_identical_runs_identical_state():
    sc = SynthConfig(users=8, events=400, items_per_cluster=120)
    a = Engine(small_config())
    b = Engine(small_config())
    for e in synth_stream(sc, 2):
        a.train_step(e)
    for e in synth_stream(sc, 2):
        b.train_step(e)
    assert engine_state_bytes(a) == engine_state_bytes(b)


# -- config validation ----------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(K=10, n=5)
    with pytest.raises(ConfigError):
        ModelConfig(mode="serving")
    with pytest.raises(ConfigError):
        ModelConfig(L=-1)
    with pytest.raises(ConfigError):
        ModelConfig(learning_rate=-0.1)


def test_cache_dimension_mismatch_rejected():
    store = CacheStore(d=4, n_retain=8, depth_max=2)
    with pytest.raises(ConfigError):
        Engine(small_config(d=6), cache=store)


def test_cache_size_reported():
    config = ModelConfig(L=3, n=40, d=8, F=8)
    assert config.cache_size == 3 * 40 * 8


# -- GSU mode ------------------------------------------------------------------

def test_gsu_training_runs_and_writes_L_per_step():
    config = small_config(K=4, n=8, n_retain=64)
    engine = Engine(config)
    feed(engine, stream_events(80, users=2))
    assert len(engine.cache) + engine.cache.evictions == 80 * config.L


def test_gsu_layer_results_shapes():
    config = small_config(K=3, n=6, n_retain=64)
    engine = Engine(config)
    feed(engine, stream_events(60, users=2))
    results = engine.gsu_layer_results(0, 1005)
    assert len(results) == config.L + 1
    for r in results:
        assert len(r.items) == 3
        assert not r.short
        scores = [s for _, s in r.items]
        assert scores == sorted(scores, reverse=True)

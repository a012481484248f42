"""Cache store: write-once freeze, retention windows, accounting, and the
binary persistence format."""

import numpy as np
import pytest

from marm.cache import (
    CacheEntry,
    CacheFormatError,
    CacheKey,
    CacheStore,
    make_keys,
)


def vec(d, fill):
    return np.full(d, fill, dtype=np.float32)


def entry(user, item, depth, written_at, d=4, fill=None):
    value = vec(d, written_at if fill is None else fill)
    return CacheEntry(key=CacheKey(user, item, depth), value=value, written_at=written_at)


def test_make_keys_deterministic_and_order_preserving():
    a = make_keys(3, [10, 11, 12], 2, depth_max=4)
    b = make_keys(3, [10, 11, 12], 2, depth_max=4)
    assert a == b
    assert [k.item_id for k in a] == [10, 11, 12]


def test_make_keys_distinct_depths_distinct_keys():
    k1 = make_keys(1, [7], 1, depth_max=2)[0]
    k2 = make_keys(1, [7], 2, depth_max=2)[0]
    assert k1 != k2


def test_make_keys_depth_range_enforced():
    with pytest.raises(ValueError):
        make_keys(1, [1], 0, depth_max=2)
    with pytest.raises(ValueError):
        make_keys(1, [1], 3, depth_max=2)


def test_make_keys_no_collisions_over_random_triples():
    rng = np.random.default_rng(0)
    triples = set()
    keys = set()
    for _ in range(10_000):
        u = int(rng.integers(0, 1 << 48))
        i = int(rng.integers(0, 1 << 48))
        dep = int(rng.integers(1, 5))
        triples.add((u, i, dep))
        keys.add(make_keys(u, [i], dep, depth_max=4)[0])
    assert len(keys) == len(triples)


def test_roundtrip_lookup_bit_identical():
    store = CacheStore(d=4, n_retain=8, depth_max=2)
    value = np.array([1.5, -2.25, 3.0, 0.125], dtype=np.float32)
    store.save_batch([CacheEntry(CacheKey(1, 2, 1), value, written_at=1)])
    (got,) = store.lookup_batch([CacheKey(1, 2, 1)])
    assert got.tobytes() == value.tobytes()
    assert store.hits == 1 and store.misses == 0


def test_lookup_never_written_is_miss():
    store = CacheStore(d=4, n_retain=8, depth_max=2)
    (got,) = store.lookup_batch([CacheKey(9, 9, 1)])
    assert got is None
    assert store.misses == 1


def test_write_once_second_write_rejected():
    store = CacheStore(d=4, n_retain=8, depth_max=2)
    first = entry(1, 2, 1, written_at=1, fill=1.0)
    second = entry(1, 2, 1, written_at=2, fill=99.0)
    assert store.save_batch([first]) == 1
    assert store.save_batch([second]) == 0
    assert store.rejected == 1
    (got,) = store.lookup_batch([CacheKey(1, 2, 1)])
    np.testing.assert_array_equal(got, first.value)


def test_all_depths_for_one_pair_accounting():
    L, d = 3, 4
    store = CacheStore(d=d, n_retain=8, depth_max=L)
    store.save_batch([entry(1, 2, depth, written_at=1, d=d) for depth in range(1, L + 1)])
    assert len(store) == L
    assert store.element_count == L * d


def test_window_eviction_oldest_out():
    n_retain = 6
    store = CacheStore(d=2, n_retain=n_retain, depth_max=1)
    for t in range(n_retain + 5):
        store.save_batch([entry(1, 100 + t, 1, written_at=t + 1, d=2)])
    oldest = [CacheKey(1, 100 + t, 1) for t in range(5)]
    newest = [CacheKey(1, 100 + t, 1) for t in range(5, n_retain + 5)]
    assert all(v is None for v in store.lookup_batch(oldest))
    assert all(v is not None for v in store.lookup_batch(newest))
    assert store.evictions == 5


def test_streaming_element_count_matches_cache_size_formula():
    # 1000 events, one user, L=4, n_retain=100, d=8 -> 4 * 100 * 8 elements
    L, n_retain, d = 4, 100, 8
    store = CacheStore(d=d, n_retain=n_retain, depth_max=L)
    for t in range(1000):
        store.save_batch(
            [entry(7, 10_000 + t, depth, written_at=t + 1, d=d) for depth in range(1, L + 1)]
        )
    assert store.element_count == L * n_retain * d
    assert store.evictions + len(store) == 1000 * L


def test_written_at_must_increase_per_user_depth():
    store = CacheStore(d=2, n_retain=4, depth_max=1)
    store.save_batch([entry(1, 10, 1, written_at=5, d=2)])
    with pytest.raises(ValueError):
        store.save_batch([entry(1, 11, 1, written_at=5, d=2)])


def test_value_dimension_checked():
    store = CacheStore(d=3, n_retain=4, depth_max=1)
    with pytest.raises(ValueError):
        store.save_batch([entry(1, 10, 1, written_at=1, d=2)])


def test_windows_independent_across_users_and_depths():
    store = CacheStore(d=2, n_retain=2, depth_max=2)
    t = 0
    for user in (1, 2):
        for depth in (1, 2):
            for item in (10, 11):
                t += 1
                store.save_batch([entry(user, item, depth, written_at=t, d=2)])
    assert len(store) == 8
    assert store.evictions == 0


# -- randomized operation sequences vs a shadow model -----------------------

class ShadowStore:
    """Independent reference: first-write-wins dict plus explicit windows."""

    def __init__(self, n_retain):
        self.n_retain = n_retain
        self.values = {}
        self.windows = {}
        self.accepted = 0
        self.evictions = 0
        self.rejected = 0

    def save(self, user, item, depth, written_at, value):
        k = (user, item, depth)
        if k in self.values:
            self.rejected += 1
            return
        self.values[k] = value
        w = self.windows.setdefault((user, depth), [])
        w.append((written_at, item))
        self.accepted += 1
        if len(w) > self.n_retain:
            _, old = w.pop(0)
            del self.values[(user, old, depth)]
            self.evictions += 1

    def get(self, user, item, depth):
        return self.values.get((user, item, depth))


def test_randomized_ops_match_shadow_model():
    rng = np.random.default_rng(1234)
    n_retain = 5
    store = CacheStore(d=3, n_retain=n_retain, depth_max=3)
    shadow = ShadowStore(n_retain)
    t = 0
    for _ in range(12_000):
        user = int(rng.integers(0, 6))
        depth = int(rng.integers(1, 4))
        if rng.random() < 0.6:
            t += 1
            item = int(rng.integers(0, 60))
            value = rng.standard_normal(3).astype(np.float32)
            store.save_batch([CacheEntry(CacheKey(user, item, depth), value, t)])
            shadow.save(user, item, depth, t, value)
        else:
            item = int(rng.integers(0, 60))
            (got,) = store.lookup_batch([CacheKey(user, item, depth)])
            expected = shadow.get(user, item, depth)
            if expected is None:
                assert got is None
            else:
                np.testing.assert_array_equal(got, expected)
    assert len(store) == len(shadow.values)
    assert store.evictions == shadow.evictions
    assert store.rejected == shadow.rejected
    assert store.evictions + len(store) == shadow.accepted
    # retained set per (user, depth) is exactly the newest n_retain writes
    for (user, depth), w in shadow.windows.items():
        for written_at, item in w:
            got = store.written_at(CacheKey(user, item, depth))
            assert got == written_at


def test_lookup_row_equivalent_to_lookup_batch():
    store = CacheStore(d=2, n_retain=8, depth_max=2)
    for t, item in enumerate([5, 6, 7], start=1):
        store.save_batch([entry(1, item, 1, written_at=t, d=2)])
    items = [5, 9, 7]
    a = store.lookup_batch(make_keys(1, items, 1, depth_max=2))
    b = store.lookup_row(1, items, 1)
    assert [x is None for x in a] == [x is None for x in b]
    for x, y in zip(a, b):
        if x is not None:
            np.testing.assert_array_equal(x, y)


def test_peek_does_not_touch_counters():
    store = CacheStore(d=2, n_retain=8, depth_max=1)
    store.save_batch([entry(1, 5, 1, written_at=1, d=2)])
    before = (store.hits, store.misses)
    store.peek_batch(make_keys(1, [5, 6], 1, depth_max=1))
    store.peek_row(1, [5, 6], 1)
    assert (store.hits, store.misses) == before


# -- persistence -------------------------------------------------------------

def test_empty_store_roundtrip(tmp_path):
    store = CacheStore(d=4, n_retain=7, depth_max=2)
    path = tmp_path / "cache.bin"
    store.persist(path)
    loaded = CacheStore.load(path)
    assert loaded.d == 4 and loaded.n_retain == 7 and loaded.depth_max == 2
    assert len(loaded) == 0
    assert loaded.stats() == store.stats()


def test_randomized_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(77)
    store = CacheStore(d=5, n_retain=9, depth_max=3)
    t = 0
    for _ in range(10_000):
        t += 1
        store.save_batch(
            [
                CacheEntry(
                    CacheKey(int(rng.integers(0, 40)), int(rng.integers(0, 500)),
                             int(rng.integers(1, 4))),
                    rng.standard_normal(5).astype(np.float32),
                    t,
                )
            ]
        )
    store.lookup_batch(make_keys(1, list(range(50)), 1, depth_max=3))
    path = tmp_path / "cache.bin"
    store.persist(path)
    loaded = CacheStore.load(path)
    assert loaded.stats() == store.stats()
    assert loaded._values.keys() == store._values.keys()
    for k, (value, written_at) in store._values.items():
        lv, lw = loaded._values[k]
        assert lw == written_at
        assert lv.tobytes() == value.tobytes()
    # identical on-disk bytes when persisted again (window order preserved)
    assert loaded.to_bytes() == store.to_bytes()


def test_flipped_magic_rejected(tmp_path):
    store = CacheStore(d=2, n_retain=4, depth_max=1)
    store.save_batch([entry(1, 2, 1, written_at=1, d=2)])
    raw = bytearray(store.to_bytes())
    raw[0] ^= 0xFF
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes(raw))
    with pytest.raises(CacheFormatError, match="byte 0"):
        CacheStore.load(path)


def test_bad_version_rejected(tmp_path):
    store = CacheStore(d=2, n_retain=4, depth_max=1)
    raw = bytearray(store.to_bytes())
    raw[4] = 0xEE
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes(raw))
    with pytest.raises(CacheFormatError, match="byte 4"):
        CacheStore.load(path)


def test_truncation_rejected_with_offset(tmp_path):
    store = CacheStore(d=2, n_retain=4, depth_max=1)
    store.save_batch([entry(1, 2, 1, written_at=1, d=2)])
    raw = store.to_bytes()
    path = tmp_path / "bad.bin"
    path.write_bytes(raw[: len(raw) - 3])
    with pytest.raises(CacheFormatError, match="byte"):
        CacheStore.load(path)

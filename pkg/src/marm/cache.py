"""External cache of frozen per-layer attention outputs.

Keys are raw (user_id, item_id, depth) triples; no scalar hashing, so
collisions cannot occur in-process.  Values are written once and frozen: a
second write to a live key is rejected and counted, never applied.  Each
(user, depth) keeps a sliding window of the ``n_retain`` most recent
writes; older entries are evicted.  After an entry is evicted its key may
be written again (it re-enters the window as a fresh write).

On-disk format (all little-endian), version 1:

    magic   4 bytes  b"MARM"
    u16     format version
    u16     d (value dimension)
    u32     n_retain
    u16     L (max depth)
    u64 x4  hits, misses, evictions, rejected
    u64     record count
    records, each length-prefixed:
        u32  payload byte length
        u64  user_id
        u64  item_id
        u16  depth
        u64  written_at
        f32 x d  value

Records are laid out per (user, depth) window in write order so a load
reconstructs window state exactly.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MARM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHIHQQQQQ")
_RECORD_FIXED = struct.Struct("<QQHQ")


class CacheFormatError(ValueError):
    """Corrupt or unreadable cache file; the message names the byte offset."""


@dataclass(frozen=True)
class CacheKey:
    user_id: int
    item_id: int
    depth: int


@dataclass
class CacheEntry:
    key: CacheKey
    value: np.ndarray
    written_at: int


@dataclass
class CacheStats:
    entries: int
    element_count: int
    hits: int
    misses: int
    evictions: int
    rejected: int


def make_keys(user_id: int, item_ids, depth: int, depth_max: int) -> list[CacheKey]:
    """One key per item, order preserved.  Depth must lie in [1, depth_max]."""
    if not 1 <= depth <= depth_max:
        raise ValueError(f"depth {depth} outside [1, {depth_max}]")
    return [CacheKey(user_id, item_id, depth) for item_id in item_ids]


class CacheStore:
    """Write-once value store with per-(user, depth) retention windows."""

    def __init__(self, d: int, n_retain: int, depth_max: int):
        if d < 1 or n_retain < 1 or depth_max < 0:
            raise ValueError("d and n_retain must be >= 1, depth_max >= 0")
        self.d = d
        self.n_retain = n_retain
        self.depth_max = depth_max
        self._values: dict[tuple[int, int, int], tuple[np.ndarray, int]] = {}
        self._windows: dict[tuple[int, int], deque] = {}
        self.hits = 0
        self.misses = 0
        self.evictions = 0
        self.rejected = 0

    def __len__(self) -> int:
        return len(self._values)

    @property
    def element_count(self) -> int:
        return len(self._values) * self.d

    def stats(self) -> CacheStats:
        return CacheStats(
            entries=len(self._values),
            element_count=self.element_count,
            hits=self.hits,
            misses=self.misses,
            evictions=self.evictions,
            rejected=self.rejected,
        )

    def save_batch(self, entries: list[CacheEntry]) -> int:
        """Apply first-writes, reject duplicates, enforce the window.

        Returns the number of accepted writes.  written_at must be strictly
        increasing per (user, depth) across accepted writes.
        """
        accepted = 0
        for entry in entries:
            key = entry.key
            if not 1 <= key.depth <= self.depth_max:
                raise ValueError(f"depth {key.depth} outside [1, {self.depth_max}]")
            value = np.asarray(entry.value, dtype=np.float32)
            if value.shape != (self.d,):
                raise ValueError(
                    f"value shape {value.shape} does not match store d={self.d}"
                )
            k = (key.user_id, key.item_id, key.depth)
            if k in self._values:
                self.rejected += 1
                continue
            wk = (key.user_id, key.depth)
            window = self._windows.get(wk)
            if window is None:
                window = deque()
                self._windows[wk] = window
            if window and window[-1][1] >= entry.written_at:
                raise ValueError(
                    f"written_at {entry.written_at} not increasing for user "
                    f"{key.user_id} depth {key.depth}"
                )
            self._values[k] = (value, entry.written_at)
            window.append((key.item_id, entry.written_at))
            accepted += 1
            if len(window) > self.n_retain:
                old_item, _ = window.popleft()
                del self._values[(key.user_id, old_item, key.depth)]
                self.evictions += 1
        return accepted

    def lookup_batch(self, keys: list[CacheKey]) -> list[np.ndarray | None]:
        """Positional lookup; None marks a miss.  Counts hits and misses."""
        out = []
        values = self._values
        hits = 0
        for key in keys:
            got = values.get((key.user_id, key.item_id, key.depth))
            if got is None:
                out.append(None)
            else:
                out.append(got[0])
                hits += 1
        self.hits += hits
        self.misses += len(keys) - hits
        return out

    def peek_batch(self, keys: list[CacheKey]) -> list[np.ndarray | None]:
        """Like lookup_batch but leaves the hit/miss counters untouched.
        Serving paths use this so reads are observationally pure."""
        values = self._values
        out = []
        for key in keys:
            got = values.get((key.user_id, key.item_id, key.depth))
            out.append(None if got is None else got[0])
        return out

    def lookup_row(self, user_id: int, item_ids, depth: int) -> list[np.ndarray | None]:
        """Equivalent to lookup_batch(make_keys(user_id, item_ids, depth,
        depth_max)) without building key objects; the training hot path."""
        values = self._values
        out = []
        hits = 0
        for item_id in item_ids:
            got = values.get((user_id, item_id, depth))
            if got is None:
                out.append(None)
            else:
                out.append(got[0])
                hits += 1
        self.hits += hits
        self.misses += len(out) - hits
        return out

    def peek_row(self, user_id: int, item_ids, depth: int) -> list[np.ndarray | None]:
        values = self._values
        return [
            got[0] if (got := values.get((user_id, item_id, depth))) is not None else None
            for item_id in item_ids
        ]

    def written_at(self, key: CacheKey) -> int | None:
        got = self._values.get((key.user_id, key.item_id, key.depth))
        return None if got is None else got[1]

    # -- persistence ---------------------------------------------------

    def to_bytes(self) -> bytes:
        chunks = [
            _HEADER.pack(
                MAGIC, FORMAT_VERSION, self.d, self.n_retain, self.depth_max,
                self.hits, self.misses, self.evictions, self.rejected,
                len(self._values),
            )
        ]
        for (user_id, depth), window in self._windows.items():
            for item_id, written_at in window:
                value, _ = self._values[(user_id, item_id, depth)]
                payload = _RECORD_FIXED.pack(user_id, item_id, depth, written_at)
                payload += value.astype("<f4", copy=False).tobytes()
                chunks.append(struct.pack("<I", len(payload)))
                chunks.append(payload)
        return b"".join(chunks)

    def persist(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "CacheStore":
        if len(data) < _HEADER.size:
            raise CacheFormatError(
                f"truncated header: file is {len(data)} bytes, need {_HEADER.size} (at byte 0)"
            )
        magic, version, d, n_retain, depth_max, hits, misses, evictions, rejected, count = (
            _HEADER.unpack_from(data, 0)
        )
        if magic != MAGIC:
            raise CacheFormatError(f"bad magic {magic!r} at byte 0")
        if version != FORMAT_VERSION:
            raise CacheFormatError(f"unsupported format version {version} at byte 4")
        store = cls(d=d, n_retain=n_retain, depth_max=depth_max)
        offset = _HEADER.size
        value_bytes = 4 * d
        expect_payload = _RECORD_FIXED.size + value_bytes
        for _ in range(count):
            if offset + 4 > len(data):
                raise CacheFormatError(f"truncated record length at byte {offset}")
            (length,) = struct.unpack_from("<I", data, offset)
            offset += 4
            if length != expect_payload:
                raise CacheFormatError(
                    f"record length {length} != expected {expect_payload} at byte {offset - 4}"
                )
            if offset + length > len(data):
                raise CacheFormatError(f"truncated record payload at byte {offset}")
            user_id, item_id, depth, written_at = _RECORD_FIXED.unpack_from(data, offset)
            value = np.frombuffer(
                data, dtype="<f4", count=d, offset=offset + _RECORD_FIXED.size
            ).copy()
            k = (user_id, item_id, depth)
            if k in store._values:
                raise CacheFormatError(f"duplicate key {k} at byte {offset}")
            store._values[k] = (value, written_at)
            store._windows.setdefault((user_id, depth), deque()).append(
                (item_id, written_at)
            )
            offset += length
        if offset != len(data):
            raise CacheFormatError(f"{len(data) - offset} trailing bytes at byte {offset}")
        store.hits = hits
        store.misses = misses
        store.evictions = evictions
        store.rejected = rejected
        return store

    @classmethod
    def load(cls, path: str | Path) -> "CacheStore":
        return cls.from_bytes(Path(path).read_bytes())

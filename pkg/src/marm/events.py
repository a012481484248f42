"""Event records, per-user exposure histories, and the event-log file format.

The log format is one record per line, decimal ASCII:

    timestamp,user_id,item_id,label

Timestamps are global event sequence numbers and must strictly increase
within a stream.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator


@dataclass
class EventRecord:
    user_id: int
    item_id: int
    label: int
    timestamp: int
    item_cluster: int | None = None  # synthetic ground truth; never shown to the model


class UserHistory:
    """Chronological ring of a user's consumed events."""

    __slots__ = ("user_id", "items")

    def __init__(self, user_id: int, capacity: int):
        self.user_id = user_id
        self.items: deque = deque(maxlen=capacity)

    def append(self, item_id: int, label: int, timestamp: int) -> None:
        self.items.append((item_id, label, timestamp))


class HistoryTracker:
    """Holds every user's history; events enter via consume() only after the
    training step that targeted them, so the current event never leaks into
    its own sequence."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._users: dict[int, UserHistory] = {}
        self._last_timestamp: int | None = None

    def consume(self, event: EventRecord) -> None:
        if self._last_timestamp is not None and event.timestamp <= self._last_timestamp:
            raise ValueError(
                f"timestamp {event.timestamp} not increasing (last {self._last_timestamp})"
            )
        self._last_timestamp = event.timestamp
        hist = self._users.get(event.user_id)
        if hist is None:
            hist = UserHistory(event.user_id, self.capacity)
            self._users[event.user_id] = hist
        hist.append(event.item_id, event.label, event.timestamp)

    def exposure_seq(self, user_id: int, n: int, filter: str = "all") -> list[int]:
        """The user's most recent <= n consumed item ids after filtering,
        oldest first.  Unknown users get an empty list (cold start)."""
        if n < 1:
            raise ValueError("n must be >= 1")
        hist = self._users.get(user_id)
        if hist is None:
            return []
        items = hist.items
        if filter == "all":
            if len(items) <= n:
                return [it[0] for it in items]
            out = [items[i][0] for i in range(len(items) - n, len(items))]
            return out
        if filter == "long_view_only":
            picked = []
            for item_id, label, _ in reversed(items):
                if label:
                    picked.append(item_id)
                    if len(picked) == n:
                        break
            picked.reverse()
            return picked
        raise ValueError(f"unknown filter {filter!r}")

    def event_count(self, user_id: int) -> int:
        hist = self._users.get(user_id)
        return 0 if hist is None else len(hist.items)

    def user_ids(self) -> list[int]:
        return list(self._users)

    def snapshot(self) -> dict:
        return {
            "capacity": self.capacity,
            "last_timestamp": self._last_timestamp,
            "users": {uid: list(h.items) for uid, h in self._users.items()},
        }

    @classmethod
    def from_snapshot(cls, snap: dict) -> "HistoryTracker":
        tracker = cls(snap["capacity"])
        tracker._last_timestamp = snap["last_timestamp"]
        for uid, items in snap["users"].items():
            hist = UserHistory(uid, snap["capacity"])
            hist.items.extend(items)
            tracker._users[uid] = hist
        return tracker


def write_event_log(path: str | Path, events: Iterable[EventRecord]) -> int:
    count = 0
    with open(path, "w") as fh:
        for ev in events:
            fh.write(f"{ev.timestamp},{ev.user_id},{ev.item_id},{ev.label}\n")
            count += 1
    return count


def read_event_log(path: str | Path) -> Iterator[EventRecord]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            ts, uid, iid, label = (int(p) for p in parts)
            yield EventRecord(user_id=uid, item_id=iid, label=label, timestamp=ts)

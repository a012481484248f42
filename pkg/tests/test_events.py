import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marm.events import EventRecord, HistoryTracker, read_event_log, write_event_log


def ev(uid, item, label, ts):
    return EventRecord(user_id=uid, item_id=item, label=label, timestamp=ts)


def test_unknown_user_cold_start_empty():
    tracker = HistoryTracker(capacity=16)
    assert tracker.exposure_seq(99, 10) == []


def test_three_consumed_events_in_order():
    tracker = HistoryTracker(capacity=16)
    for t, item in enumerate([5, 7, 6], start=1):
        tracker.consume(ev(1, item, 1, t))
    assert tracker.exposure_seq(1, 10) == [5, 7, 6]
    assert tracker.exposure_seq(1, 2) == [7, 6]


def test_timestamps_must_strictly_increase():
    tracker = HistoryTracker(capacity=16)
    tracker.consume(ev(1, 5, 1, 3))
    with pytest.raises(ValueError):
        tracker.consume(ev(2, 6, 1, 3))


def test_capacity_ring_drops_oldest():
    tracker = HistoryTracker(capacity=3)
    for t in range(1, 6):
        tracker.consume(ev(1, 100 + t, 0, t))
    assert tracker.exposure_seq(1, 10) == [103, 104, 105]


def test_long_view_filter_matches_brute_force_replay():
    rng = np.random.default_rng(0)
    tracker = HistoryTracker(capacity=2048)
    replay = []
    for t in range(1, 501):
        item = int(rng.integers(0, 10_000))
        label = int(rng.random() < 0.4)
        tracker.consume(ev(3, item, label, t))
        replay.append((item, label))
    expected = [item for item, label in replay if label == 1][-100:]
    assert tracker.exposure_seq(3, 100, "long_view_only") == expected


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n_small=st.integers(1, 30), extra=st.integers(0, 30))
def test_exposure_seq_suffix_property(seed, n_small, extra):
    rng = np.random.default_rng(seed)
    tracker = HistoryTracker(capacity=256)
    for t in range(1, 80):
        tracker.consume(ev(1, int(rng.integers(0, 50)), int(rng.integers(0, 2)), t))
    for filt in ("all", "long_view_only"):
        small = tracker.exposure_seq(1, n_small, filt)
        large = tracker.exposure_seq(1, n_small + extra, filt)
        assert small == large[len(large) - len(small):]


def test_unknown_filter_rejected():
    tracker = HistoryTracker(capacity=4)
    tracker.consume(ev(1, 2, 1, 1))
    with pytest.raises(ValueError):
        tracker.exposure_seq(1, 5, "liked_only")


def test_snapshot_roundtrip():
    tracker = HistoryTracker(capacity=8)
    for t in range(1, 12):
        tracker.consume(ev(t % 3, 100 + t, t % 2, t))
    restored = HistoryTracker.from_snapshot(tracker.snapshot())
    for uid in (0, 1, 2):
        assert restored.exposure_seq(uid, 20) == tracker.exposure_seq(uid, 20)
    with pytest.raises(ValueError):
        restored.consume(ev(0, 999, 1, 11))  # last timestamp preserved


def test_event_log_roundtrip(tmp_path):
    events = [
        ev(1, 10, 1, 1),
        ev(2, 20, 0, 2),
        ev(1, 30, 1, 3),
    ]
    path = tmp_path / "events.log"
    assert write_event_log(path, events) == 3
    back = list(read_event_log(path))
    assert back == events
    assert path.read_text().splitlines()[0] == "1,1,10,1"


def test_event_log_malformed_line(tmp_path):
    path = tmp_path / "events.log"
    path.write_text("1,2,3\n")
    with pytest.raises(ValueError):
        list(read_event_log(path))

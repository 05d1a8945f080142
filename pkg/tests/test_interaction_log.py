import numpy as np
import pytest

from corrseg.interaction_log import (
    AnnotationPeriod,
    EventLog,
    InteractionEvent,
    durations,
    read_events,
)


def ev(t, kind, vid="a"):
    return InteractionEvent(t, kind, vid)


class TestEventLog:
    def test_append_then_read_back(self, tmp_path):
        log = EventLog(tmp_path / "s.log")
        event = ev(1.5, "open_file", "vol1")
        log.record(event)
        assert log.events() == [event]

    def test_decreasing_timestamp_rejected(self, tmp_path):
        log = EventLog(tmp_path / "s.log")
        log.record(ev(5.0, "save"))
        with pytest.raises(ValueError, match="out-of-order"):
            log.record(ev(4.0, "mouse_down"))

    def test_empty_log_reads_empty(self, tmp_path):
        assert read_events(tmp_path / "missing.log") == []

    def test_ordering_survives_reopen(self, tmp_path):
        path = tmp_path / "s.log"
        EventLog(path).record(ev(3.0, "open_file"))
        log = EventLog(path)
        with pytest.raises(ValueError):
            log.record(ev(2.0, "save"))
        log.record(ev(3.5, "save"))
        assert [e.timestamp for e in log.events()] == [3.0, 3.5]

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            InteractionEvent(0.0, "telepathy")


class TestDurations:
    def test_hand_trace_simple(self):
        events = [
            ev(0.0, "open_file", "A"),
            ev(5.0, "mouse_down", "A"),
            ev(10.0, "mouse_release", "A"),
            ev(12.0, "open_file", "B"),
        ]
        assert durations(events)["A"] == pytest.approx(12.0)

    def test_hand_trace_gap_excluded(self):
        events = [
            ev(0.0, "open_file", "A"),
            ev(5.0, "save", "A"),
            ev(35.0, "open_file", "B"),
        ]
        assert durations(events)["A"] == pytest.approx(5.0)

    def test_gap_of_exactly_threshold_excluded(self):
        events = [
            ev(0.0, "open_file", "A"),
            ev(20.0, "save", "A"),
        ]
        assert durations(events)["A"] == 0.0

    def test_events_outside_periods_excluded(self):
        events = [
            ev(0.0, "open_file", "A"),
            ev(5.0, "save", "A"),
        ]
        periods = [AnnotationPeriod(100.0, 200.0)]
        assert durations(events, periods) == {}

    def test_multiple_spans_sum(self):
        events = [
            ev(0.0, "open_file", "A"),
            ev(4.0, "save", "A"),
            ev(6.0, "open_file", "B"),
            ev(8.0, "save", "B"),
            ev(10.0, "open_file", "A"),
            ev(13.0, "save", "A"),
        ]
        out = durations(events)
        assert out["A"] == pytest.approx(6.0 + 3.0)
        assert out["B"] == pytest.approx(4.0)

    def test_unordered_events_rejected(self):
        events = [ev(5.0, "open_file", "A"), ev(1.0, "save", "A")]
        with pytest.raises(ValueError, match="time-ordered"):
            durations(events)

    def test_never_opened_absent(self):
        events = [ev(0.0, "zoom_change", "A")]
        assert "A" not in durations(events)

    def test_infinite_threshold_spans(self):
        events = [
            ev(0.0, "open_file", "A"),
            ev(50.0, "save", "A"),
            ev(120.0, "open_file", "B"),
            ev(150.0, "save", "B"),
        ]
        out = durations(events, inactivity_threshold=float("inf"))
        # A runs to the next open; B to its last event
        assert out["A"] == pytest.approx(120.0)
        assert out["B"] == pytest.approx(30.0)

    def test_randomized_against_brute_force(self):
        rng = np.random.default_rng(99)
        for _ in range(30):
            events, threshold = _random_log(rng)
            got = durations(events, inactivity_threshold=threshold)
            assert got == pytest.approx(_brute_force_durations(events, threshold))

    def test_insertion_never_decreases(self):
        rng = np.random.default_rng(5)
        events, threshold = _random_log(rng)
        base = durations(events, inactivity_threshold=threshold)
        for i in range(len(events) - 1):
            mid = (events[i].timestamp + events[i + 1].timestamp) / 2
            gap = events[i + 1].timestamp - events[i].timestamp
            if gap >= threshold:
                continue
            extended = sorted(
                events + [ev(mid, "mouse_down", events[i].volume_id)],
                key=lambda e: e.timestamp,
            )
            out = durations(extended, inactivity_threshold=threshold)
            for vid, seconds in base.items():
                assert out[vid] >= seconds - 1e-9


def _random_log(rng):
    kinds = ["save", "axial_slice_change", "zoom_change", "mouse_down", "mouse_release"]
    events = []
    t = 0.0
    for _ in range(rng.integers(5, 40)):
        t += float(rng.exponential(8.0))
        if rng.random() < 0.25:
            events.append(ev(t, "open_file", f"vol{rng.integers(0, 4)}"))
        else:
            events.append(ev(t, str(rng.choice(kinds)), "x"))
    return events, 20.0


def _brute_force_durations(events, threshold):
    """Independent oracle: explicit span extraction then pairwise gap sums."""
    opens = [i for i, e in enumerate(events) if e.kind == "open_file"]
    totals = {}
    for n, i in enumerate(opens):
        vid = events[i].volume_id
        end = opens[n + 1] if n + 1 < len(opens) else len(events) - 1
        total = totals.get(vid, 0.0)
        for j in range(i, end):
            gap = events[j + 1].timestamp - events[j].timestamp
            if gap < threshold:
                total += gap
        totals[vid] = total
    return totals

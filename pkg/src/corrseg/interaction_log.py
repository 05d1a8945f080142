"""Client interaction events and per-image annotation durations.

Events are appended to plain-text logs, one `timestamp<TAB>kind<TAB>volume_id`
line each, so sessions can be replayed and diffed. Duration computation
filters events to the user-declared annotation periods, attributes time to
the file opened most recently, and drops inactivity gaps of 20 s or more.
"""

from dataclasses import dataclass
from pathlib import Path

EVENT_KINDS = frozenset(
    {
        "open_file",
        "save",
        "axial_slice_change",
        "sagittal_slice_change",
        "zoom_change",
        "mouse_down",
        "mouse_release",
    }
)

DEFAULT_INACTIVITY_THRESHOLD = 20.0


@dataclass(frozen=True)
class InteractionEvent:
    timestamp: float
    kind: str
    volume_id: str = ""

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")


@dataclass(frozen=True)
class AnnotationPeriod:
    """A user-declared interval during which annotation work happened."""

    start: float
    stop: float

    def __post_init__(self):
        if not self.start < self.stop:
            raise ValueError(f"period start {self.start} must be < stop {self.stop}")

    def contains(self, t: float) -> bool:
        return self.start <= t <= self.stop


class EventLog:
    """Append-only, time-ordered event log backed by a file."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._last_timestamp = None
        if self.path.exists():
            events = read_events(self.path)
            if events:
                self._last_timestamp = events[-1].timestamp

    def record(self, event: InteractionEvent) -> None:
        if self._last_timestamp is not None and event.timestamp < self._last_timestamp:
            raise ValueError(
                f"out-of-order timestamp {event.timestamp} < {self._last_timestamp}"
            )
        with open(self.path, "a") as fh:
            fh.write(f"{event.timestamp!r}\t{event.kind}\t{event.volume_id}\n")
            fh.flush()
        self._last_timestamp = event.timestamp

    def events(self) -> list[InteractionEvent]:
        return read_events(self.path)


def read_events(path) -> list[InteractionEvent]:
    path = Path(path)
    if not path.exists():
        return []
    events = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        ts, kind, volume_id = line.split("\t", 2)
        events.append(InteractionEvent(float(ts), kind, volume_id))
    return events


def durations(
    events,
    periods=None,
    inactivity_threshold: float = DEFAULT_INACTIVITY_THRESHOLD,
) -> dict[str, float]:
    """Per-volume annotation seconds.

    A file's span runs from its open_file event until the next open_file;
    within a span, gaps between consecutive in-period events accumulate
    unless the gap is >= inactivity_threshold. Multiple spans for the same
    file sum. Files never opened are absent from the result.
    """
    events = list(events)
    for prev, cur in zip(events, events[1:]):
        if cur.timestamp < prev.timestamp:
            raise ValueError("events must be time-ordered")
    if periods is not None:
        periods = list(periods)
        events = [e for e in events if any(p.contains(e.timestamp) for p in periods)]

    totals: dict[str, float] = {}
    current: str | None = None
    prev_ts: float | None = None
    for event in events:
        if current is not None and prev_ts is not None:
            gap = event.timestamp - prev_ts
            if gap < inactivity_threshold:
                totals[current] += gap
        if event.kind == "open_file":
            current = event.volume_id
            totals.setdefault(current, 0.0)
        prev_ts = event.timestamp
    return totals

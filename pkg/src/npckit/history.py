"""Events and the append-only event history of a node.

Appending can cancel earlier events: a Remove deletes any earlier live
Insert of the same entry name, and a Close deletes any earlier live Resume
of the same port and subscription.  The cancelling event itself stays.
Receive events are never recorded; they only arm a subscription.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .filters import FilterExpr, eval_filter
from .model import Entry

INSERT = "Insert"
REMOVE = "Remove"
RECEIVE = "Receive"
SUSPEND = "Suspend"
RESUME = "Resume"
CLOSE = "Close"
TIME = "Time"

KINDS = frozenset([INSERT, REMOVE, RECEIVE, SUSPEND, RESUME, CLOSE, TIME])
ENTRY_EVENT_KINDS = frozenset([INSERT, REMOVE])
FLOW_KINDS = frozenset([RECEIVE, SUSPEND, RESUME, CLOSE])

NODE_ORIGIN = "@node"


@dataclass(frozen=True)
class Event:
    """Immutable record of something that happened at a node.

    ``seq`` is 0 until the history stamps the event; ``created_at`` is a
    logical timestamp (virtual clock ticks in sim mode, wall clock
    milliseconds otherwise).  ``entry`` is a snapshot: for a Remove it holds
    the removed entry's last state.
    """

    kind: str
    origin_port: str = NODE_ORIGIN
    entry: Entry | None = None
    subscription: str | None = None
    filter: FilterExpr | None = None
    label: str | None = None
    seq: int = 0
    created_at: int = 0


def insert_event(entry: Entry, origin: str = NODE_ORIGIN) -> Event:
    return Event(INSERT, origin_port=origin, entry=entry)


def remove_event(entry: Entry, origin: str = NODE_ORIGIN) -> Event:
    """A Remove names its target through ``entry``; the node swaps in the
    live entry's snapshot when it processes the post."""
    return Event(REMOVE, origin_port=origin, entry=entry)


def receive_event(subscription: str = "default", filt: FilterExpr | None = None) -> Event:
    return Event(RECEIVE, subscription=subscription, filter=filt)


def suspend_event(subscription: str = "default") -> Event:
    return Event(SUSPEND, subscription=subscription)


def resume_event(subscription: str = "default") -> Event:
    return Event(RESUME, subscription=subscription)


def close_event(subscription: str = "default") -> Event:
    return Event(CLOSE, subscription=subscription)


def time_event(label: str) -> Event:
    return Event(TIME, label=label)


def is_exclusive(ev: Event) -> bool:
    """Events offered to exactly one consumer are marked by metadata
    ``exclusive=true`` on the carried entry or by an ``exclusive`` label."""
    if ev.label == "exclusive":
        return True
    return ev.entry is not None and ev.entry.meta.get("exclusive") == "true"


def snapshot_entry_from_event(ev: Event) -> Entry:
    if ev.entry is None:
        raise HistoryError("no-entry", f"{ev.kind} event carries no entry")
    return ev.entry


class HistoryError(Exception):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


class EventHistory:
    """Ordered log of stamped events with cancellation and bounded retention.

    ``max_events`` limits the number of live events; the oldest are dropped
    first.  ``dropped`` counts everything that left the log, whether
    cancelled or aged out.
    """

    def __init__(self, max_events: int | None = None, clock=None):
        if max_events is not None and max_events < 1:
            raise ValueError("max_events must be positive or None")
        self.max_events = max_events
        self._clock = clock or (lambda: 0)
        self.live: list[Event] = []
        self.dropped = 0
        self._last_seq = 0
        self._live_seqs: set[int] = set()
        self._consumed: set[int] = set()
        self._by_seq: dict[int, Event] = {}

    def __len__(self) -> int:
        return len(self.live)

    @property
    def last_seq(self) -> int:
        return self._last_seq

    def append(self, ev: Event) -> Event:
        """Stamp and record an event, applying cancellation and retention.

        Returns the stamped event. Receive events are rejected; they are
        subscription control, not history.
        """
        if ev.kind == RECEIVE:
            raise HistoryError("rejected-receive", "Receive events are never recorded")
        if ev.kind not in KINDS:
            raise HistoryError("bad-kind", ev.kind)
        if ev.seq != 0:
            raise HistoryError("already-stamped", f"seq {ev.seq}")
        self._last_seq += 1
        stamped = replace(ev, seq=self._last_seq, created_at=self._clock())
        if stamped.kind == REMOVE and stamped.entry is not None:
            self._drop_where(lambda e: e.kind == INSERT and e.entry is not None
                             and e.entry.name == stamped.entry.name)
        elif stamped.kind == CLOSE:
            self._drop_where(lambda e: e.kind == RESUME
                             and e.origin_port == stamped.origin_port
                             and e.subscription == stamped.subscription)
        self.live.append(stamped)
        self._live_seqs.add(stamped.seq)
        self._by_seq[stamped.seq] = stamped
        if self.max_events is not None:
            while len(self.live) > self.max_events:
                old = self.live.pop(0)
                self._forget(old.seq)
        return stamped

    def _drop_where(self, pred) -> None:
        kept = []
        for e in self.live:
            if pred(e):
                self._forget(e.seq, keep_list=True)
            else:
                kept.append(e)
        self.live = kept

    def _forget(self, seq: int, keep_list: bool = False) -> None:
        self._live_seqs.discard(seq)
        self._consumed.discard(seq)
        self._by_seq.pop(seq, None)
        self.dropped += 1

    def is_live(self, seq: int) -> bool:
        return seq in self._live_seqs

    def get(self, seq: int) -> Event | None:
        return self._by_seq.get(seq)

    def mark_consumed(self, seq: int) -> None:
        if seq in self._live_seqs:
            self._consumed.add(seq)

    def is_consumed(self, seq: int) -> bool:
        return seq in self._consumed

    def read_after(self, next_seq: int, filt: FilterExpr) -> tuple[Event | None, int]:
        """Earliest live event with ``seq >= next_seq`` matching the filter.

        Returns ``(event, event.seq + 1)`` on a hit and ``(None, end)`` at
        the end of history, where ``end`` is past every stamped event.
        Cursors only ever move forward.
        """
        for e in self.live:
            if e.seq >= next_seq and eval_filter(filt, e):
                return e, e.seq + 1
        return None, max(next_seq, self._last_seq + 1)

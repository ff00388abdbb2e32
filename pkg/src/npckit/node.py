"""Nodes: entry tables, event posting, and fair delivery to subscriptions.

A node is a single sequential process.  Ports post events to it; accepted
entry events land in the history and are then delivered, one per step, to
the subscriptions whose effective filter matches.  Delivery walks a ring
over the subscriptions so that no consumer starves.

Flow control follows the port protocol: a Receive arms a subscription, a
Suspend from the port pauses it, a Resume rearms it, and when a subscription
has seen everything the node emits a Suspend to the port.  A Resume posted
at the end of the history is recorded so that pull-side ports can notice
fresh demand; a Close ends the subscription and cancels those Resumes.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

from .filters import And, FilterExpr, TRUE, FilterIndex, eval_filter
from .history import (CLOSE, Event, EventHistory, INSERT, KINDS, NODE_ORIGIN,
                      RECEIVE, REMOVE, RESUME, SUSPEND, TIME, is_exclusive)
from .model import Entry, NODE, PORT, PortSpec


class NodeError(Exception):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


@dataclass
class TimerSpec:
    """One-shot (``at``) or periodic (``every``) source of Time events."""

    label: str
    every: int | None = None
    at: int | None = None
    next_fire: int = 0


@dataclass
class Subscription:
    port: str
    name: str
    dyn_filter: FilterExpr
    flag: bool = False
    cursor: int = 1
    at_end_notified: bool = False
    pending: deque = field(default_factory=deque)
    offered: set = field(default_factory=set)

    @property
    def key(self) -> tuple[str, str]:
        return (self.port, self.name)


@dataclass
class Delivered:
    port: str
    subscription: str
    event: Event


class Node:
    """Entry table plus event history plus delivery state.

    ``sinks`` maps a port name to a callable ``(event, subscription) ->
    consumed`` invoked for each delivery; the port runtime installs one per
    spawned behavior and tests may install plain functions.  The insert and
    remove hooks let the surrounding server spawn behaviors and build
    subnodes without the node knowing about either.
    """

    def __init__(self, path: tuple[str, ...] = (), clock=None, max_history: int | None = None,
                 indexed: bool = False, tracer=None):
        self.path = path
        self.actor_base = ""
        self.clock = clock or (lambda: 0)
        self.history = EventHistory(max_events=max_history, clock=self.clock)
        self.entries: dict[str, Entry] = {}
        self.subs: dict[tuple[str, str], Subscription] = {}
        self.sinks: dict[str, object] = {}
        self.timers: dict[str, TimerSpec] = {}
        self.attachments: dict[str, dict] = {}
        self.indexed = indexed
        self.index: FilterIndex | None = FilterIndex() if indexed else None
        self.tracer = tracer
        self.on_port_inserted = None
        self.on_port_removed = None
        self.on_node_inserted = None
        self._ring: list[tuple[str, str]] = []
        self._next = 0

    # -- naming ------------------------------------------------------------

    @property
    def path_text(self) -> str:
        return self.actor_base + "/" + "/".join(self.path)

    def _trace(self, action: str, detail: str, actor: str | None = None) -> None:
        if self.tracer is not None:
            self.tracer.record(actor or self.path_text, action, detail)

    # -- spec access ---------------------------------------------------------

    def port_spec(self, port: str) -> PortSpec | None:
        e = self.entries.get(port)
        if e is not None and e.kind == PORT and isinstance(e.payload, PortSpec):
            return e.payload
        return None

    def _effective(self, sub: Subscription) -> FilterExpr:
        spec = self.port_spec(sub.port)
        if spec is None:
            return sub.dyn_filter
        return And(spec.input_filter, sub.dyn_filter)

    # -- posting -------------------------------------------------------------

    def post_event(self, from_port: str, ev: Event) -> Event | None:
        """Accept an event from a port (or from the node itself as
        ``@node``), returning the stamped event if it was recorded.

        Entry and Time events from ports must pass the port's output filter.
        Subscription control events bypass it: they only affect the posting
        port's own delivery and a port with data-only filters could never
        subscribe otherwise.
        """
        if ev.seq != 0:
            raise NodeError("already-stamped", f"seq {ev.seq}")
        if ev.kind not in KINDS:
            raise NodeError("bad-kind", ev.kind)
        if from_port != NODE_ORIGIN and self.port_spec(from_port) is None:
            raise NodeError("unknown-port", from_port)
        ev = replace(ev, origin_port=from_port)

        if ev.kind == REMOVE and ev.entry is not None:
            current = self.entries.get(ev.entry.name)
            if current is not None:
                # the Remove carries the last state of the entry it removes,
                # and output filters judge that state, not the caller's stub
                ev = replace(ev, entry=current)

        if ev.kind in (INSERT, REMOVE, TIME) and from_port != NODE_ORIGIN:
            spec = self.port_spec(from_port)
            if not eval_filter(spec.output_filter, ev):
                raise NodeError("rejected-filter", f"{ev.kind} from {from_port}")

        handler = {
            RECEIVE: self._post_receive,
            SUSPEND: self._post_suspend,
            RESUME: self._post_resume,
            CLOSE: self._post_close,
            INSERT: self._post_insert,
            REMOVE: self._post_remove,
            TIME: self._post_time,
        }[ev.kind]
        return handler(from_port, ev)

    def _initial_cursor(self, port: str) -> int:
        spec = self.port_spec(port)
        return spec.cursor if spec is not None else 1

    def _sub_for(self, from_port: str, ev: Event) -> tuple[Subscription, bool]:
        name = ev.subscription or "default"
        key = (from_port, name)
        sub = self.subs.get(key)
        if sub is not None:
            return sub, False
        sub = Subscription(from_port, name, TRUE, cursor=self._initial_cursor(from_port))
        self.subs[key] = sub
        self._ring.append(key)
        if self.index is not None:
            self._index_register(sub)
        return sub, True

    def _post_receive(self, from_port: str, ev: Event) -> None:
        if from_port == NODE_ORIGIN:
            raise NodeError("bad-kind", "the node does not subscribe to itself")
        sub, _created = self._sub_for(from_port, ev)
        sub.dyn_filter = ev.filter if ev.filter is not None else TRUE
        sub.flag = True
        sub.at_end_notified = False
        if self.index is not None:
            self._index_reregister(sub)
        self._trace("post", f"Receive {sub.name}", actor=self._port_actor(from_port))
        return None

    def _post_suspend(self, from_port: str, ev: Event) -> None:
        key = (from_port, ev.subscription or "default")
        sub = self.subs.get(key)
        if sub is not None:
            sub.flag = False
        self._trace("post", f"Suspend {ev.subscription or 'default'}",
                    actor=self._port_actor(from_port))
        return None

    def _post_resume(self, from_port: str, ev: Event) -> Event | None:
        sub, _created = self._sub_for(from_port, ev)
        sub.flag = True
        self._trace("post", f"Resume {sub.name}", actor=self._port_actor(from_port))
        if self._peek(sub) is None:
            # nothing left to deliver: record the Resume so interested
            # in-ports can react to fresh demand
            stamped = self._append(replace(ev, subscription=sub.name))
            return stamped
        return None

    def _post_close(self, from_port: str, ev: Event) -> Event:
        name = ev.subscription or "default"
        key = (from_port, name)
        sub = self.subs.pop(key, None)
        if sub is not None:
            self._ring_remove(key)
            if self.index is not None and key in self.index:
                self.index.unregister(key)
        self._trace("post", f"Close {name}", actor=self._port_actor(from_port))
        return self._append(replace(ev, subscription=name))

    def _post_insert(self, from_port: str, ev: Event) -> Event:
        if ev.entry is None:
            raise NodeError("missing-entry", "Insert without entry")
        name = ev.entry.name
        old = self.entries.get(name)
        self.entries[name] = ev.entry
        self._trace("post", f"Insert {name}", actor=self._port_actor(from_port))
        stamped = self._append(ev)
        if old is not None and old.kind == PORT:
            self._drop_port(name, old)
        if ev.entry.kind == PORT and self.on_port_inserted is not None:
            self.on_port_inserted(ev.entry)
        if ev.entry.kind == NODE and self.on_node_inserted is not None:
            self.on_node_inserted(ev.entry)
        if is_exclusive(stamped):
            self.deliver_exclusive(stamped)
        return stamped

    def _post_remove(self, from_port: str, ev: Event) -> Event | None:
        if ev.entry is None:
            raise NodeError("missing-entry", "Remove without entry")
        name = ev.entry.name
        current = self.entries.pop(name, None)
        if current is None:
            # removing what is not there is a no-op, not an error, and
            # leaves no trace in the history
            self._trace("post", f"Remove {name} (absent)", actor=self._port_actor(from_port))
            return None
        self._trace("post", f"Remove {name}", actor=self._port_actor(from_port))
        stamped = self._append(ev)
        if current.kind == PORT:
            self._drop_port(name, current)
        if is_exclusive(stamped):
            self.deliver_exclusive(stamped)
        return stamped

    def _post_time(self, from_port: str, ev: Event) -> Event:
        stamped = self._append(ev)
        if is_exclusive(stamped):
            self.deliver_exclusive(stamped)
        return stamped

    def _port_actor(self, port: str) -> str:
        if port == NODE_ORIGIN:
            return self.path_text
        return f"{self.path_text}:{port}"

    def _append(self, ev: Event) -> Event:
        stamped = self.history.append(ev)
        name = stamped.entry.name if stamped.entry is not None else (stamped.label or stamped.subscription or "")
        self._trace("append", f"{stamped.kind}#{stamped.seq} {name}".rstrip())
        if self.index is not None:
            matched = sorted(self.index.match(stamped))
            self._trace("index", f"{stamped.kind}#{stamped.seq} matched {len(matched)} "
                                 f"of {len(self.index)} via {len(self.index.candidates(stamped))} candidates")
            for key in matched:
                sub = self.subs.get(key)
                if sub is not None:
                    sub.pending.append(stamped.seq)
        return stamped

    # -- port lifecycle ------------------------------------------------------

    def drop_port(self, name: str) -> None:
        entry = self.entries.get(name)
        self._drop_port(name, entry)

    def _drop_port(self, name: str, entry: Entry | None) -> None:
        for key in [k for k in self.subs if k[0] == name]:
            del self.subs[key]
            self._ring_remove(key)
            if self.index is not None and key in self.index:
                self.index.unregister(key)
        self.sinks.pop(name, None)
        self.attachments.pop(name, None)
        if self.on_port_removed is not None:
            self.on_port_removed(name, entry)

    def create_default_subscription(self, port: str, spec: PortSpec) -> Subscription:
        """Ports that never send a named Receive still have a ``default``
        subscription whose dynamic filter is true; its starting flag and
        cursor come from the port spec."""
        key = (port, "default")
        sub = self.subs.get(key)
        if sub is None:
            sub = Subscription(port, "default", TRUE, flag=spec.receive_flag, cursor=spec.cursor)
            self.subs[key] = sub
            self._ring.append(key)
            if self.index is not None:
                self._index_register(sub)
        return sub

    # -- index bookkeeping ----------------------------------------------------

    def _index_register(self, sub: Subscription) -> None:
        self.index.register(sub.key, self._effective(sub))
        sub.pending = deque(
            e.seq for e in self.history.live
            if e.seq >= sub.cursor and eval_filter(self._effective(sub), e)
        )

    def _index_reregister(self, sub: Subscription) -> None:
        if sub.key in self.index:
            self.index.unregister(sub.key)
        self._index_register(sub)

    def reindex_port(self, port: str) -> None:
        if self.index is None:
            return
        for key, sub in self.subs.items():
            if key[0] == port:
                self._index_reregister(sub)

    # -- delivery -------------------------------------------------------------

    def _skippable(self, sub: Subscription, ev: Event) -> bool:
        return (ev.origin_port == sub.port
                or self.history.is_consumed(ev.seq)
                or ev.seq in sub.offered)

    def _peek(self, sub: Subscription) -> Event | None:
        """Next deliverable event for a subscription, without moving state."""
        if self.index is not None:
            for seq in sub.pending:
                if seq < sub.cursor or not self.history.is_live(seq):
                    continue
                ev = self.history.get(seq)
                if not self._skippable(sub, ev):
                    return ev
            return None
        pos = sub.cursor
        while True:
            ev, nxt = self.history.read_after(pos, self._effective(sub))
            if ev is None:
                return None
            if self._skippable(sub, ev):
                pos = nxt
                continue
            return ev

    def _take_next(self, sub: Subscription) -> Event | None:
        """Like _peek but advances the cursor over everything it skips."""
        if self.index is not None:
            while sub.pending:
                seq = sub.pending[0]
                if seq < sub.cursor or not self.history.is_live(seq):
                    sub.pending.popleft()
                    continue
                ev = self.history.get(seq)
                if self._skippable(sub, ev):
                    # keep the cursor in lockstep with scan mode, so a later
                    # resubscription replays the same events in either mode
                    sub.pending.popleft()
                    sub.offered.discard(seq)
                    sub.cursor = max(sub.cursor, seq + 1)
                    continue
                sub.pending.popleft()
                return ev
            sub.cursor = max(sub.cursor, self.history.last_seq + 1)
            return None
        while True:
            ev, nxt = self.history.read_after(sub.cursor, self._effective(sub))
            if ev is None:
                sub.cursor = max(sub.cursor, nxt)
                return None
            if self._skippable(sub, ev):
                sub.offered.discard(ev.seq)
                sub.cursor = nxt
                continue
            return ev

    def _ring_remove(self, key) -> None:
        try:
            idx = self._ring.index(key)
        except ValueError:
            return
        self._ring.pop(idx)
        if idx < self._next:
            self._next -= 1
        if self._ring:
            self._next %= len(self._ring)
        else:
            self._next = 0

    def _advance_ring_past(self, key) -> None:
        try:
            idx = self._ring.index(key)
        except ValueError:
            return
        self._next = (idx + 1) % len(self._ring)

    def deliver_step(self) -> Delivered | None:
        """Deliver at most one event to the next ready subscription in ring
        order; returns None when no subscription is ready.

        A ready subscription that has caught up with the history is told so
        with a node-issued Suspend (its receive flag drops until it posts
        Resume); the notification is not repeated until something new was
        actually delivered, so an idle pair of ports cannot ping-pong
        Suspend and Resume forever.
        """
        ring = list(self._ring)
        n = len(ring)
        for i in range(n):
            key = ring[(self._next + i) % n]
            sub = self.subs.get(key)
            if sub is None or not sub.flag:
                continue
            ev = self._take_next(sub)
            if ev is not None:
                sub.cursor = max(sub.cursor, ev.seq + 1)
                if ev.kind in (INSERT, REMOVE, TIME):
                    sub.at_end_notified = False
                self._advance_ring_past(key)
                self._trace("deliver", f"{ev.kind}#{ev.seq} -> {sub.name}",
                            actor=self._port_actor(sub.port))
                consumed = self._sink(sub.port, ev, sub.name)
                if consumed and is_exclusive(ev):
                    self.history.mark_consumed(ev.seq)
                return Delivered(sub.port, sub.name, ev)
            if not sub.at_end_notified:
                sub.flag = False
                sub.at_end_notified = True
                notice = Event(SUSPEND, origin_port=NODE_ORIGIN, subscription=sub.name)
                self._advance_ring_past(key)
                self._trace("deliver", f"Suspend@node -> {sub.name}",
                            actor=self._port_actor(sub.port))
                self._sink(sub.port, notice, sub.name)
                return Delivered(sub.port, sub.name, notice)
        return None

    def _sink(self, port: str, ev: Event, sub_name: str):
        sink = self.sinks.get(port)
        if sink is None:
            return None
        return sink(ev, sub_name)

    def deliver_exclusive(self, ev: Event) -> str | None:
        """Offer an exclusive event to matching armed ports, highest
        priority first (ties broken by port name), until one consumes it.

        Returns the consuming port, or None when nobody took it; in that
        case the event stays in the history for later subscribers.
        """
        if not is_exclusive(ev):
            raise NodeError("not-exclusive", f"event #{ev.seq}")
        matching: dict[str, list[Subscription]] = {}
        for key in list(self._ring):
            sub = self.subs.get(key)
            if sub is None or not sub.flag or sub.port == ev.origin_port:
                continue
            if eval_filter(self._effective(sub), ev):
                matching.setdefault(sub.port, []).append(sub)

        def prio(port: str) -> int:
            spec = self.port_spec(port)
            return spec.priority if spec is not None else 0

        for port in sorted(matching, key=lambda p: (-prio(p), p)):
            for sub in matching[port]:
                sub.offered.add(ev.seq)
            first = matching[port][0]
            self._trace("offer", f"{ev.kind}#{ev.seq} -> {port}", actor=self._port_actor(port))
            consumed = self._sink(port, ev, first.name)
            if consumed:
                self.history.mark_consumed(ev.seq)
                self._trace("consume", f"{ev.kind}#{ev.seq} by {port}")
                return port
        return None

    # -- timers ----------------------------------------------------------------

    def schedule(self, timer: TimerSpec, now: int | None = None) -> None:
        if timer.label in self.timers:
            raise NodeError("duplicate-label", timer.label)
        if timer.every is not None:
            if timer.every <= 0:
                raise NodeError("bad-timer", "period must be positive")
            timer.next_fire = (now if now is not None else self.clock()) + timer.every
        elif timer.at is not None:
            timer.next_fire = timer.at
        else:
            raise NodeError("bad-timer", "timer needs every or at")
        self.timers[timer.label] = timer

    def tick(self, now: int) -> list[Event]:
        """Post a Time event for every firing due at ``now``. Periodic
        timers rearm at a fixed rate so late ticks catch up."""
        fired: list[Event] = []
        for label in list(self.timers):
            timer = self.timers.get(label)
            while timer is not None and timer.next_fire <= now:
                fired.append(self.post_event(NODE_ORIGIN, Event(TIME, label=label)))
                if timer.every is not None:
                    timer.next_fire += timer.every
                else:
                    del self.timers[label]
                    timer = None
        return fired

    # -- reads for channels ------------------------------------------------------

    def read_for_pull(self, after: int, filt: FilterExpr, max_events: int) -> tuple[list[Event], int, bool]:
        """Serve a pull: live events with seq > after matching the filter,
        oldest first, skipping consumed exclusives. Returns the batch, the
        last seq scanned, and whether the end of the history was reached."""
        out: list[Event] = []
        pos = after + 1
        last = after
        while max_events <= 0 or len(out) < max_events:
            ev, nxt = self.history.read_after(pos, filt)
            if ev is None:
                return out, max(last, nxt - 1), True
            pos = nxt
            last = ev.seq
            if self.history.is_consumed(ev.seq):
                continue
            out.append(ev)
        return out, last, self._peek_pull(pos, filt)

    def _peek_pull(self, pos: int, filt: FilterExpr) -> bool:
        ev, _ = self.history.read_after(pos, filt)
        return ev is None

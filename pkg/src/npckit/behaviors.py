"""Reference behaviors: everything the stock applications are built from.

Each behavior is small on purpose; the applications differ mostly in how
ports are wired and filtered, not in code.  Conventions shared by all of
them:

- a node-issued Suspend means "you are caught up"; long-lived consumers
  answer it with Resume so they keep receiving,
- events leaving a node over a channel are tagged with the node's URL in
  ``origin-node`` metadata unless already tagged, so replicas can tell
  copies from originals,
- events arriving over a channel are posted through the receiving port and
  its output filter, which is the only admission control there is.
"""

from __future__ import annotations

import re
from dataclasses import replace

from .filters import (And, Cmp, FilterError, Not, Or, eval_filter, glob_match,
                      parse_filter, print_filter)
from .history import (Event, INSERT, NODE_ORIGIN, REMOVE, SUSPEND, TIME,
                      insert_event, remove_event)
from .model import DOCUMENT, PORT, PortSpec, document_entry, port_entry, validate_entry
from .ports import BEHAVIORS, Behavior, behavior
from .wire import (ACK, BYE, CMD, ERROR, EVENT, HELLO, PULL, WireError,
                   entry_from_json, entry_to_json, event_from_json, event_to_json)


def _type_is(kind: str) -> Cmp:
    return Cmp("event.type", "==", kind)


def _kind_is(kind: str) -> Cmp:
    return Cmp("entry.kind", "==", kind)


FLAVORS = {
    "document": And(_type_is(INSERT), _kind_is(DOCUMENT)),
    "entry": _type_is(INSERT),
    "event": Or(_type_is(INSERT), _type_is(REMOVE)),
}


def tagged_with_origin(ev: Event, node_url: str) -> Event:
    """Copy of the event whose entry carries origin-node, unless it already
    names where it came from."""
    if ev.entry is None or ev.entry.meta.get("origin-node"):
        return ev
    meta = dict(ev.entry.meta)
    meta["origin-node"] = node_url
    return replace(ev, entry=replace(ev.entry, meta=meta))


def restamped(ev: Event) -> Event:
    """Incoming channel events carry the sender's stamps; the local node
    assigns its own."""
    return replace(ev, seq=0, created_at=0)


def _err(conn, code: str, message: str = "") -> None:
    conn.send({"kind": ERROR, "code": code, "message": message})


# ---------------------------------------------------------------------------
# admin: the general-purpose channel endpoint

@behavior("admin")
class AdminBehavior(Behavior):
    """Channel endpoint for pushes, pulls, and management commands.

    What a remote can actually do through an admin port is decided by the
    port's filters: with true/true it is full management, with document-only
    filters it is a plain replication endpoint.
    """

    def on_external(self, conn, msg: dict) -> None:
        kind = msg.get("kind")
        if kind == EVENT:
            self._on_push(conn, msg)
        elif kind == PULL:
            self._on_pull(conn, msg)
        elif kind == CMD:
            self._on_cmd(conn, msg)
        elif kind in (HELLO, ACK, ERROR, BYE):
            pass
        else:
            _err(conn, "bad-kind", f"unexpected frame kind {kind!r}")

    # pushes

    def _on_push(self, conn, msg: dict) -> None:
        try:
            ev = event_from_json(msg.get("event"))
        except WireError as e:
            _err(conn, e.code, str(e))
            return
        if ev.kind not in (INSERT, REMOVE):
            _err(conn, "bad-kind", f"cannot push {ev.kind} events")
            return
        try:
            self.ctx.post(restamped(ev))
        except Exception as e:
            _err(conn, getattr(e, "code", "rejected"), str(e))

    # pulls

    def _read(self, conn, msg: dict, tag: bool) -> None:
        try:
            filt = parse_filter(msg.get("filter", "true"))
        except FilterError as e:
            _err(conn, e.code, str(e))
            return
        after = msg.get("after", 0)
        max_events = msg.get("max", 256)
        if not isinstance(after, int) or not isinstance(max_events, int):
            _err(conn, "malformed", "after and max must be integers")
            return
        spec = self.ctx.spec
        effective = And(spec.input_filter, filt) if spec is not None else filt
        events, last, at_end = self.ctx.node.read_for_pull(after, effective, max_events)
        url = self.ctx.node_url().text()
        if tag:
            events = [tagged_with_origin(e, url) for e in events]
        conn.send({"kind": ACK, "events": [event_to_json(e) for e in events],
                   "last": last, "at_end": at_end})

    def _on_pull(self, conn, msg: dict) -> None:
        self._read(conn, msg, tag=True)

    # commands

    def _on_cmd(self, conn, msg: dict) -> None:
        op = msg.get("op")
        handler = {
            "list": self._op_list, "get": self._op_get, "insert": self._op_insert,
            "remove": self._op_remove, "history": self._op_history,
            "fetch": self._op_fetch, "query": self._op_query, "abort": self._op_abort,
        }.get(op)
        if handler is None:
            _err(conn, "bad-op", f"unknown op {op!r}")
            return
        handler(conn, msg)

    def _op_list(self, conn, msg: dict) -> None:
        entries = [entry_to_json(e) for _, e in sorted(self.ctx.node.entries.items())]
        conn.send({"kind": ACK, "entries": entries})

    def _op_get(self, conn, msg: dict) -> None:
        entry = self.ctx.node.entries.get(msg.get("name", ""))
        if entry is None:
            _err(conn, "not-found", f"no entry {msg.get('name')!r}")
            return
        conn.send({"kind": ACK, "entry": entry_to_json(entry)})

    def _op_insert(self, conn, msg: dict) -> None:
        try:
            entry = entry_from_json(msg.get("entry"))
        except WireError as e:
            _err(conn, e.code, str(e))
            return
        problems = validate_entry(entry)
        if problems:
            _err(conn, "invalid-entry", "; ".join(problems))
            return
        if entry.kind == PORT and entry.payload.behavior not in BEHAVIORS:
            _err(conn, "unknown-behavior", entry.payload.behavior)
            return
        try:
            stamped = self.ctx.post(insert_event(entry))
        except Exception as e:
            _err(conn, getattr(e, "code", "rejected"), str(e))
            return
        conn.send({"kind": ACK, "seq": stamped.seq})

    def _op_remove(self, conn, msg: dict) -> None:
        name = msg.get("name", "")
        entry = self.ctx.node.entries.get(name)
        if entry is None:
            _err(conn, "not-found", f"no entry {name!r}")
            return
        try:
            stamped = self.ctx.post(remove_event(entry))
        except Exception as e:
            _err(conn, getattr(e, "code", "rejected"), str(e))
            return
        conn.send({"kind": ACK, "seq": stamped.seq if stamped else 0})

    def _op_history(self, conn, msg: dict) -> None:
        self._read(conn, msg, tag=False)

    def _op_fetch(self, conn, msg: dict) -> None:
        wanted = msg.get("name", "")
        name = self.ctx.server.next_name("req")
        spec = PortSpec("request", {"entry": wanted})
        self.ctx.node.attachments[name] = {"conn": conn}
        try:
            self.ctx.post(insert_event(port_entry(name, spec)))
        except Exception as e:
            self.ctx.node.attachments.pop(name, None)
            _err(conn, getattr(e, "code", "rejected"), str(e))

    def _op_query(self, conn, msg: dict) -> None:
        text = msg.get("query")
        if not isinstance(text, str) or not text.strip():
            _err(conn, "bad-query", "query text required")
            return
        mode = self.ctx.config.get("query_mode", "local")
        name = msg.get("name") or self.ctx.server.next_name("query")
        entry = port_entry(name, PortSpec("query", {"mode": mode}),
                           meta={"query": text})
        self.ctx.node.attachments[name] = {"conn": conn}
        try:
            self.ctx.post(insert_event(entry))
        except Exception as e:
            self.ctx.node.attachments.pop(name, None)
            _err(conn, getattr(e, "code", "rejected"), str(e))

    def _op_abort(self, conn, msg: dict) -> None:
        name = msg.get("name", "")
        entry = self.ctx.node.entries.get(name)
        if entry is None or entry.kind != PORT:
            _err(conn, "not-found", f"no port {name!r}")
            return
        try:
            self.ctx.post(remove_event(entry))
        except Exception as e:
            _err(conn, getattr(e, "code", "rejected"), str(e))
            return
        conn.send({"kind": ACK, "aborted": name})


# ---------------------------------------------------------------------------
# forwarder: push matching events to a remote port, or serve pulls

@behavior("forwarder")
class ForwarderBehavior(Behavior):
    def __init__(self, ctx):
        super().__init__(ctx)
        self.conn = None
        self.target = self.ctx.config.get("target")
        self.target_node = None
        if self.target:
            try:
                from .model import parse_url
                self.target_node = parse_url(self.target).parent().text()
            except Exception:
                self.target_node = None

    def _flavor_filter(self):
        flavor = self.ctx.config.get("flavor", "document")
        f = FLAVORS.get(flavor, FLAVORS["document"])
        extra = self.ctx.config.get("filter")
        if extra:
            f = And(f, parse_filter(extra))
        return f

    def on_start(self) -> None:
        if self.target:
            self.ctx.receive("default", self._flavor_filter())

    def _ensure_conn(self):
        if self.conn is not None and not self.conn.closed:
            return self.conn
        self.conn = self.ctx.dial(self.target)
        return self.conn

    def on_event(self, ev, subscription: str) -> bool:
        if ev.kind == SUSPEND and ev.origin_port == NODE_ORIGIN:
            self.ctx.resume(subscription)
            return False
        if ev.kind not in (INSERT, REMOVE) or not self.target:
            return False
        if (ev.kind == INSERT and self.target_node and ev.entry is not None
                and ev.entry.meta.get("origin-node") == self.target_node):
            # the copy came from the very node this port feeds: forwarding
            # it back would bounce forever
            self.ctx.trace("skip", f"echo of {ev.entry.name}")
            return False
        conn = self._ensure_conn()
        if conn is None:
            self.ctx.trace("drop", f"no channel to {self.target}")
            return False
        out = tagged_with_origin(ev, self.ctx.node_url().text())
        self.ctx.send(conn, {"kind": EVENT, "event": event_to_json(out)})
        return False

    def on_external(self, conn, msg: dict) -> None:
        kind = msg.get("kind")
        if kind == PULL:
            self._serve_pull(conn, msg)
        elif kind == BYE:
            if conn is self.conn:
                self.conn = None
        elif kind == ERROR:
            self.ctx.trace("peer-error", f"{msg.get('code')}: {msg.get('message', '')}")

    def _serve_pull(self, conn, msg: dict) -> None:
        try:
            filt = parse_filter(msg.get("filter", "true"))
        except FilterError as e:
            _err(conn, e.code, str(e))
            return
        after = msg.get("after", 0)
        max_events = msg.get("max", 256)
        if not isinstance(after, int) or not isinstance(max_events, int):
            _err(conn, "malformed", "after and max must be integers")
            return
        spec = self.ctx.spec
        effective = And(spec.input_filter, filt) if spec is not None else filt
        events, last, at_end = self.ctx.node.read_for_pull(after, effective, max_events)
        url = self.ctx.node_url().text()
        events = [tagged_with_origin(e, url) for e in events]
        conn.send({"kind": ACK, "events": [event_to_json(e) for e in events],
                   "last": last, "at_end": at_end})

    def on_stop(self, reason: str) -> None:
        if self.conn is not None:
            self.ctx.close_conn(self.conn)
            self.conn = None


@behavior("classifier")
class ClassifierBehavior(ForwarderBehavior):
    """Forwarder whose input filter routes one class of documents, used to
    fan a feed out into per-topic subnodes."""


# ---------------------------------------------------------------------------
# puller: periodic pull replication

@behavior("puller")
class PullerBehavior(Behavior):
    def __init__(self, ctx):
        super().__init__(ctx)
        self.conn = None
        self.cursor = int(self.ctx.config.get("after", "0"))
        self.label = self.ctx.config.get("label") or f"pull-{self.ctx.name}"

    def on_start(self) -> None:
        every = int(self.ctx.config.get("every", "1"))
        self.ctx.schedule(self.label, every=every)
        self.ctx.receive("default", And(_type_is(TIME),
                                        Cmp("event.label", "==", self.label)))

    def _flavor_text(self) -> str:
        flavor = self.ctx.config.get("flavor", "document")
        f = FLAVORS.get(flavor, FLAVORS["document"])
        extra = self.ctx.config.get("filter")
        if extra:
            f = And(f, parse_filter(extra))
        return print_filter(f)

    def on_event(self, ev, subscription: str) -> bool:
        if ev.kind == SUSPEND and ev.origin_port == NODE_ORIGIN:
            self.ctx.resume(subscription)
            return False
        if ev.kind == TIME:
            self._pull()
        return False

    def _pull(self) -> None:
        if self.conn is None or self.conn.closed:
            self.conn = self.ctx.dial(self.ctx.config["source"])
        if self.conn is None:
            self.ctx.trace("drop", "source unreachable")
            return
        self.ctx.send(self.conn, {"kind": PULL, "after": self.cursor,
                                  "filter": self._flavor_text(),
                                  "max": int(self.ctx.config.get("max", "256"))})

    def on_external(self, conn, msg: dict) -> None:
        kind = msg.get("kind")
        if kind == ACK and "events" in msg:
            own = self.ctx.node_url().text()
            for raw in msg["events"]:
                try:
                    ev = event_from_json(raw)
                except WireError:
                    continue
                if ev.kind not in (INSERT, REMOVE):
                    continue
                if (ev.kind == INSERT and ev.entry is not None
                        and ev.entry.meta.get("origin-node") == own):
                    continue  # our own document coming home
                try:
                    self.ctx.post(restamped(ev))
                except Exception:
                    self.ctx.trace("rejected", f"{ev.kind} {ev.entry.name if ev.entry else ''}")
            if isinstance(msg.get("last"), int):
                self.cursor = max(self.cursor, msg["last"])
            if not msg.get("at_end", True):
                self._pull()
        elif kind == BYE:
            if conn is self.conn:
                self.conn = None

    def on_stop(self, reason: str) -> None:
        if self.conn is not None:
            self.ctx.close_conn(self.conn)
            self.conn = None


# ---------------------------------------------------------------------------
# request: fetch one document and answer whoever asked

@behavior("request")
class RequestBehavior(Behavior):
    """Retrieves a named document for the connection attached at spawn.

    Answers immediately when the document is present; otherwise the
    subscription scan settles it: a live Insert answers, the end-of-history
    Suspend means the document does not exist.  Either way the port
    removes itself afterwards."""

    def __init__(self, ctx):
        super().__init__(ctx)
        self.wanted = self.ctx.config.get("entry", "")
        self.conn = self.ctx.attachment.get("conn")
        self.done = False

    def on_start(self) -> None:
        entry = self.ctx.node.entries.get(self.wanted)
        if entry is not None:
            self._answer(entry)
            return
        self.ctx.receive("default", And(_type_is(INSERT),
                                        Cmp("entry.name", "==", self.wanted)))

    def _answer(self, entry) -> None:
        if self.done:
            return
        self.done = True
        if self.conn is not None:
            if entry.kind == DOCUMENT:
                self.conn.send({"kind": ACK, "name": entry.name,
                                "content_b64": entry_to_json(entry)["content_b64"],
                                "media_type": entry.payload.media_type,
                                "meta": dict(entry.meta)})
            else:
                _err(self.conn, "not-a-document", f"{entry.name} is a {entry.kind}")
        self.ctx.self_remove()

    def _not_found(self) -> None:
        if self.done:
            return
        self.done = True
        if self.conn is not None:
            _err(self.conn, "not-found", f"no document {self.wanted!r}")
        self.ctx.self_remove()

    def on_event(self, ev, subscription: str) -> bool:
        if ev.kind == INSERT and ev.entry is not None and ev.entry.name == self.wanted:
            self._answer(self.ctx.node.entries.get(self.wanted) or ev.entry)
        elif ev.kind == SUSPEND and ev.origin_port == NODE_ORIGIN:
            self._not_found()
        return False

    def on_external(self, conn, msg: dict) -> None:
        kind = msg.get("kind")
        if kind == BYE:
            if not self.done:
                self.done = True
                self.ctx.self_remove()
        elif kind not in (HELLO, ACK, ERROR):
            _err(conn, "bad-kind", "this connection only carries the answer")


# ---------------------------------------------------------------------------
# query: local table scans and mediated fan-out

@behavior("query")
class QueryBehavior(Behavior):
    """Answers the query in this port's own metadata over the attached
    connection.

    Local mode scans the node's current documents.  Mediated mode relies on
    translator ports watching for query ports: each relevant translator
    spawns a wrapper port, wrappers post result documents tagged reply-to,
    and this port streams them out, cleaning up as it goes.  The query is
    complete when every wrapper has retired."""

    def __init__(self, ctx):
        super().__init__(ctx)
        self.conn = self.ctx.attachment.get("conn")
        self.mode = self.ctx.config.get("mode", "local")
        self.count = 0
        self.seen_wrapper = False
        self.live_wrappers: set[str] = set()
        self.sent: set[str] = set()
        self.finished = False

    def _query_text(self) -> str:
        entry = self.ctx.entry
        return entry.meta.get("query", "") if entry is not None else ""

    def on_start(self) -> None:
        if self.mode == "local":
            self._run_local()
            return
        mine = Cmp("meta.reply-to", "==", self.ctx.name)
        self.ctx.receive("results", And(_type_is(INSERT), And(_kind_is(DOCUMENT), mine)))
        self.ctx.receive("wrappers", And(Or(_type_is(INSERT), _type_is(REMOVE)),
                                         And(_kind_is(PORT), mine)))

    def _run_local(self) -> None:
        try:
            f = parse_filter(self._query_text())
        except FilterError as e:
            if self.conn is not None:
                _err(self.conn, e.code, str(e))
            self.finished = True
            self.ctx.self_remove()
            return
        for name in sorted(self.ctx.node.entries):
            entry = self.ctx.node.entries[name]
            if entry.kind != DOCUMENT:
                continue
            probe = Event(INSERT, origin_port=NODE_ORIGIN, entry=entry)
            if eval_filter(f, probe):
                self.count += 1
                if self.conn is not None:
                    self.conn.send({"kind": EVENT,
                                    "event": event_to_json(insert_event(entry))})
        self._finish()

    def _finish(self) -> None:
        if self.finished:
            return
        self.finished = True
        if self.conn is not None:
            self.conn.send({"kind": ACK, "done": True, "count": self.count})
        self.ctx.self_remove()

    def _pending_results(self) -> bool:
        return any(e.kind == DOCUMENT and e.meta.get("reply-to") == self.ctx.name
                   for e in self.ctx.node.entries.values())

    def _maybe_finish(self) -> None:
        # done only when every wrapper retired AND every result it posted
        # has been streamed out; the two arrive on separate subscriptions
        # in no guaranteed relative order
        if self.seen_wrapper and not self.live_wrappers and not self._pending_results():
            self._finish()

    def on_event(self, ev, subscription: str) -> bool:
        if ev.kind == SUSPEND and ev.origin_port == NODE_ORIGIN:
            self.ctx.resume(subscription)
            return False
        if subscription == "results" and ev.kind == INSERT and ev.entry is not None:
            # two sources can hold the same document; the caller sees it once
            ident = ev.entry.meta.get("source-name", ev.entry.name)
            if ident not in self.sent:
                self.sent.add(ident)
                self.count += 1
                if self.conn is not None:
                    self.conn.send({"kind": EVENT, "event": event_to_json(ev)})
            # result delivered: drop the document so nothing piles up
            current = self.ctx.node.entries.get(ev.entry.name)
            if current is not None:
                self.ctx.post(remove_event(current))
            self._maybe_finish()
        elif subscription == "wrappers" and ev.entry is not None:
            if ev.kind == INSERT:
                self.seen_wrapper = True
                self.live_wrappers.add(ev.entry.name)
            elif ev.kind == REMOVE:
                self.live_wrappers.discard(ev.entry.name)
                self._maybe_finish()
        return False

    def on_external(self, conn, msg: dict) -> None:
        kind = msg.get("kind")
        if kind == BYE:
            if not self.finished:
                # caller hung up: treat it as an abort
                self.finished = True
                self._cleanup()
                self.ctx.self_remove()
        elif kind not in (HELLO, ACK, ERROR):
            _err(conn, "bad-kind", "this connection only streams query results")

    def _cleanup(self) -> None:
        node = self.ctx.node
        for name in sorted(self.live_wrappers):
            entry = node.entries.get(name)
            if entry is not None:
                self.ctx.post_as_node(remove_event(entry))
        self.live_wrappers.clear()
        for name in sorted(list(node.entries)):
            entry = node.entries.get(name)
            if (entry is not None and entry.kind == DOCUMENT
                    and entry.meta.get("reply-to") == self.ctx.name):
                self.ctx.post_as_node(remove_event(entry))

    def on_stop(self, reason: str) -> None:
        if not self.finished:
            self.finished = True
            if self.conn is not None:
                _err(self.conn, "aborted", "query was aborted")
            self._cleanup()


@behavior("translator")
class TranslatorBehavior(Behavior):
    """Watches for query ports it understands and spawns a wrapper per hit.

    ``accept`` is a glob over the raw query text; a translator that does
    not match stays silent and some other translator may still serve it."""

    def on_start(self) -> None:
        has_query = Not(Cmp("meta.query", "==", ""))
        self.ctx.receive("default", And(_type_is(INSERT),
                                        And(_kind_is(PORT), has_query)))

    def on_event(self, ev, subscription: str) -> bool:
        if ev.kind == SUSPEND and ev.origin_port == NODE_ORIGIN:
            self.ctx.resume(subscription)
            return False
        if ev.kind != INSERT or ev.entry is None:
            return False
        query = ev.entry.meta.get("query", "")
        accept = self.ctx.config.get("accept", "*")
        if not glob_match(accept, query):
            self.ctx.trace("decline", f"{ev.entry.name}: {query!r}")
            return False
        source = self.ctx.config.get("source", "")
        wrapper = f"wrap-{self.ctx.name}-{ev.entry.name}"
        spec = PortSpec("wrapper", {"source": source, "query": query,
                                    "reply_to": ev.entry.name})
        try:
            self.ctx.post(insert_event(port_entry(
                wrapper, spec, meta={"reply-to": ev.entry.name})))
        except Exception:
            self.ctx.trace("rejected", f"wrapper for {ev.entry.name}")
        return False


@behavior("wrapper")
class WrapperBehavior(Behavior):
    """One-shot bridge to an external source: fetch, post, retire."""

    def __init__(self, ctx):
        super().__init__(ctx)
        self.done = False
        # captured now: by the time on_stop runs the port entry is gone
        # and the config with it
        self.source = self.ctx.config.get("source", "")
        self.query = self.ctx.config.get("query", "true")
        self.reply_to = self.ctx.config.get("reply_to", "")

    def step(self) -> bool:
        if self.done:
            return False
        self.done = True
        stub = self.ctx.stub(self.source)
        results = []
        if stub is not None:
            try:
                results = stub.query(self.query)
            except FilterError:
                self.ctx.trace("bad-query", self.query)
        for i, entry in enumerate(results):
            meta = dict(entry.meta)
            meta.update({"reply-to": self.reply_to, "rank": str(i),
                         "source": self.source, "source-name": entry.name})
            doc = document_entry(f"{self.ctx.name}-r{i}", entry.payload.content,
                                 entry.payload.media_type, meta=meta)
            try:
                self.ctx.post(insert_event(doc))
            except Exception:
                self.ctx.trace("rejected", doc.name)
        self.ctx.self_remove()
        return True

    def on_stop(self, reason: str) -> None:
        if not self.done:
            # torn down before it ran: let the source cancel server-side work
            stub = self.ctx.stub(self.source)
            if stub is not None and hasattr(stub, "abort"):
                stub.abort(self.ctx.name)
            self.done = True


# ---------------------------------------------------------------------------
# alerting and mailing list

@behavior("subscriber")
class SubscriberBehavior(Behavior):
    """Mails matching documents to one address, immediately or as a digest.

    What "matching" means is entirely the port's input filter; this code
    only turns deliveries into mail."""

    def __init__(self, ctx):
        super().__init__(ctx)
        self.buffer: list[str] = []

    def on_start(self) -> None:
        self.ctx.receive("docs", And(_type_is(INSERT), _kind_is(DOCUMENT)))
        digest = self.ctx.config.get("digest", "")
        if digest:
            self.ctx.receive("ticks", And(_type_is(TIME),
                                          Cmp("event.label", "==", digest)))

    def _mail(self, subject: str, body: str) -> None:
        stub = self.ctx.stub(self.ctx.config.get("stub", "mail"))
        if stub is None:
            self.ctx.trace("drop", "no mail stub")
            return
        stub.send_mail(self.ctx.config.get("address", ""), subject, body)

    def on_event(self, ev, subscription: str) -> bool:
        if ev.kind == SUSPEND and ev.origin_port == NODE_ORIGIN:
            self.ctx.resume(subscription)
            return False
        if subscription == "docs" and ev.kind == INSERT and ev.entry is not None:
            body = ev.entry.payload.content.decode("utf-8", errors="replace")
            if self.ctx.config.get("digest", ""):
                self.buffer.append(ev.entry.name)
            else:
                self._mail(ev.entry.name, body)
        elif subscription == "ticks" and ev.kind == TIME:
            if self.buffer:
                names = ", ".join(self.buffer)
                self._mail(f"digest of {len(self.buffer)}", names)
                self.buffer.clear()
        return False


def _safe_name(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "-", text)[:64] or "member"


@behavior("subscriber-manager")
class SubscriberManagerBehavior(Behavior):
    """Mailing list plumbing.

    Role ``manage`` turns request documents (meta ``request`` of subscribe
    or unsubscribe, plus ``address``) into subscriber ports and back.  Role
    ``submit`` is a channel endpoint that only lets document events in."""

    def on_start(self) -> None:
        if self.ctx.config.get("role", "manage") == "manage":
            has_request = Not(Cmp("meta.request", "==", ""))
            self.ctx.receive("default", And(_type_is(INSERT),
                                            And(_kind_is(DOCUMENT), has_request)))

    def _member_port(self, address: str) -> str:
        return "member-" + _safe_name(address)

    def on_event(self, ev, subscription: str) -> bool:
        if ev.kind == SUSPEND and ev.origin_port == NODE_ORIGIN:
            self.ctx.resume(subscription)
            return False
        if ev.kind != INSERT or ev.entry is None:
            return False
        request = ev.entry.meta.get("request", "")
        address = ev.entry.meta.get("address", "")
        name = self._member_port(address)
        if request == "subscribe" and address:
            config = {"address": address, "stub": self.ctx.config.get("stub", "mail")}
            digest = self.ctx.config.get("digest", "")
            if digest:
                config["digest"] = digest
            topic = self.ctx.config.get("topic_filter", "")
            spec = PortSpec("subscriber", config,
                            input_filter=parse_filter(topic) if topic else parse_filter("true"),
                            # membership starts now, not at the backlog
                            cursor=self.ctx.node.history.last_seq + 1)
            if name not in self.ctx.node.entries:
                self.ctx.post(insert_event(port_entry(name, spec)))
        elif request == "unsubscribe":
            member = self.ctx.node.entries.get(name)
            if member is not None:
                self.ctx.post(remove_event(member))
        # the request document is processed: clear it away
        current = self.ctx.node.entries.get(ev.entry.name)
        if current is not None:
            self.ctx.post(remove_event(current))
        return False

    def on_external(self, conn, msg: dict) -> None:
        if self.ctx.config.get("role", "manage") != "submit":
            return
        kind = msg.get("kind")
        if kind == EVENT:
            try:
                ev = event_from_json(msg.get("event"))
            except WireError as e:
                _err(conn, e.code, str(e))
                return
            if ev.kind not in (INSERT, REMOVE):
                _err(conn, "bad-kind", f"cannot push {ev.kind} events")
                return
            try:
                self.ctx.post(restamped(ev))
            except Exception as e:
                _err(conn, getattr(e, "code", "rejected"), str(e))
        elif kind in (HELLO, ACK, ERROR, BYE):
            pass
        else:
            _err(conn, "not-allowed", "submission endpoint only accepts events")


@behavior("gc")
class GcBehavior(Behavior):
    """Removes documents that have outlived ``max_age`` clock units."""

    def __init__(self, ctx):
        super().__init__(ctx)
        self.ages: dict[str, int] = {}
        self.label = f"gc-{self.ctx.name}"

    def on_start(self) -> None:
        every = int(self.ctx.config.get("every", "10"))
        self.ctx.schedule(self.label, every=every)
        self.ctx.receive("watch", And(_type_is(INSERT), _kind_is(DOCUMENT)))
        self.ctx.receive("ticks", And(_type_is(TIME),
                                      Cmp("event.label", "==", self.label)))

    def on_event(self, ev, subscription: str) -> bool:
        if ev.kind == SUSPEND and ev.origin_port == NODE_ORIGIN:
            self.ctx.resume(subscription)
            return False
        if subscription == "watch" and ev.kind == INSERT and ev.entry is not None:
            self.ages[ev.entry.name] = ev.created_at
        elif subscription == "ticks" and ev.kind == TIME:
            max_age = int(self.ctx.config.get("max_age", "100"))
            now = self.ctx.now()
            for name in sorted(self.ages):
                if now - self.ages[name] >= max_age:
                    del self.ages[name]
                    entry = self.ctx.node.entries.get(name)
                    if entry is not None and entry.kind == DOCUMENT:
                        self.ctx.post(remove_event(entry))
        return False

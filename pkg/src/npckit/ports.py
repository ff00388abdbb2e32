"""Port runtime: the context handed to behaviors and the behavior registry.

A behavior is the code of a port.  It talks to its node through a
PortContext and never touches other ports or nodes directly; anything
remote goes through a dialed connection, anything local through posted
events.  Behaviors are registered under the identifier used in port specs,
so a port entry fully describes how to run the port.
"""

from __future__ import annotations

from .filters import FilterExpr
from .history import (NODE_ORIGIN, close_event, receive_event, remove_event,
                      resume_event, suspend_event)
from .model import EntryUrl


class PortContext:
    """Everything a behavior may do, bound to one port on one node."""

    def __init__(self, server, node, name: str, attachment: dict | None = None):
        self.server = server
        self.node = node
        self.name = name
        self.attachment = attachment or {}

    # -- introspection -------------------------------------------------------

    @property
    def spec(self):
        return self.node.port_spec(self.name)

    @property
    def config(self) -> dict:
        spec = self.spec
        return spec.config if spec is not None else {}

    @property
    def entry(self):
        return self.node.entries.get(self.name)

    def node_url(self) -> EntryUrl:
        return self.server.url_for(self.node)

    def url_of(self, entry_name: str) -> EntryUrl:
        return self.node_url().child(entry_name)

    def now(self) -> int:
        return self.server.clock()

    # -- posting to the node ---------------------------------------------------

    def post(self, ev):
        return self.node.post_event(self.name, ev)

    def receive(self, subscription: str = "default", filt: FilterExpr | None = None):
        return self.post(receive_event(subscription, filt))

    def suspend(self, subscription: str = "default"):
        return self.post(suspend_event(subscription))

    def resume(self, subscription: str = "default"):
        return self.post(resume_event(subscription))

    def close(self, subscription: str = "default"):
        return self.post(close_event(subscription))

    def self_remove(self) -> None:
        """Retire this port.  Issued by the node rather than through the
        port's own output filter, so restricted ports can still clean up
        after themselves."""
        entry = self.entry
        if entry is not None:
            self.node.post_event(NODE_ORIGIN, remove_event(entry))

    def post_as_node(self, ev):
        """Node-issued post for teardown paths that outlive the port entry."""
        return self.node.post_event(NODE_ORIGIN, ev)

    def schedule(self, label: str, every: int | None = None, at: int | None = None) -> None:
        from .node import TimerSpec
        self.node.schedule(TimerSpec(label, every=every, at=at), now=self.now())

    # -- the outside world -------------------------------------------------------

    def dial(self, url_text: str):
        """Open a channel to a remote port; None when refused or unreachable."""
        return self.server.dial(url_text, owner=(self.node.path, self.name))

    def send(self, conn, msg: dict) -> bool:
        ok = conn.send(msg)
        self.trace("send", f"{msg.get('kind')} -> {conn.label}")
        return ok

    def close_conn(self, conn) -> None:
        self.server.release_conn(conn)

    def stub(self, name: str):
        return self.server.stub(name, requester=self.name)

    def trace(self, action: str, detail: str) -> None:
        if self.node.tracer is not None:
            self.node.tracer.record(self.node._port_actor(self.name), action, detail)


class Behavior:
    """Base class: a port that never reacts to anything."""

    def __init__(self, ctx: PortContext):
        self.ctx = ctx

    def on_start(self) -> None:
        pass

    def on_event(self, ev, subscription: str) -> bool:
        """A delivery from the node.  Return True to consume an exclusive
        event; the return value is ignored otherwise."""
        return False

    def on_external(self, conn, msg: dict) -> None:
        """A message on a connection this port owns."""

    def on_stop(self, reason: str) -> None:
        pass

    def step(self) -> bool:
        """One slice of autonomous work; True when something was done."""
        return False


BEHAVIORS: dict[str, type] = {}


def behavior(name: str):
    def register(cls):
        if name in BEHAVIORS:
            raise ValueError(f"behavior already registered: {name}")
        BEHAVIORS[name] = cls
        cls.behavior_name = name
        return cls
    return register


@behavior("manual")
class ManualBehavior(Behavior):
    """Inert port driven entirely from outside (tests and sim stimuli)."""

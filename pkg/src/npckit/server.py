"""A server hosts a tree of nodes behind one network identity.

The server owns the boring plumbing: building nodes from configuration,
spawning behaviors when port entries appear, routing inbound channel
messages to the port that owns the connection, dialing out with firewall
checks, and driving delivery.  All of it runs on a single driver thread
(or the sim loop); reader threads only ever enqueue messages.
"""

from __future__ import annotations

import base64
import queue
import threading
import time

from .filters import FilterError, parse_filter
from .firewall import IN, OUT, FirewallError, check, parse_rules
from .gateways import MailStub, RepoStub, dial_tcp
from .history import NODE_ORIGIN, insert_event
from .model import (DOCUMENT, Entry, EntryUrl, NODE, PORT, PortSpec, UrlError,
                    document_entry, node_entry, parse_url, port_entry,
                    valid_name)
from .node import Node
from .ports import BEHAVIORS, PortContext
from .wire import BYE, ERROR, HELLO
from . import behaviors as _stock_behaviors  # noqa: F401  (fills BEHAVIORS)


class ConfigError(Exception):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


class ServerConfig:
    def __init__(self, host: str, npc_tcp_port: int = 7070, http_port: int | None = None,
                 firewall_text: str = "", indexed: bool = False,
                 max_history: int | None = None, root_name: str = "root",
                 entries: list | None = None, stubs: dict | None = None):
        self.host = host.lower()
        self.npc_tcp_port = npc_tcp_port
        self.http_port = http_port
        self.firewall_text = firewall_text
        self.rules = parse_rules(firewall_text)
        self.indexed = indexed
        self.max_history = max_history
        self.root_name = root_name
        self.entries = entries or []
        self.stubs = stubs or {}

    @classmethod
    def from_dict(cls, d: dict, path: str = "config") -> "ServerConfig":
        _require(isinstance(d, dict), path, "must be an object")
        host = d.get("host")
        _require(isinstance(host, str) and host, f"{path}.host", "required string")
        port = d.get("npc_tcp_port", 7070)
        _require(isinstance(port, int) and not isinstance(port, bool)
                 and 0 <= port <= 65535, f"{path}.npc_tcp_port", "port number")
        http_port = d.get("http_port")
        if http_port is not None:
            _require(isinstance(http_port, int) and 0 <= http_port <= 65535,
                     f"{path}.http_port", "port number")
        firewall_text = d.get("firewall", "")
        _require(isinstance(firewall_text, str), f"{path}.firewall", "rule text")
        indexed = d.get("indexed", False)
        _require(isinstance(indexed, bool), f"{path}.indexed", "true or false")
        max_history = d.get("max_history")
        if max_history is not None:
            _require(isinstance(max_history, int) and max_history >= 1,
                     f"{path}.max_history", "positive integer")
        root = d.get("root", {})
        _require(isinstance(root, dict), f"{path}.root", "must be an object")
        root_name = root.get("name", "root")
        _require(valid_name(root_name), f"{path}.root.name", "entry name")
        raw_entries = root.get("entries", [])
        _require(isinstance(raw_entries, list), f"{path}.root.entries", "must be a list")
        entries = [parse_entry_def(e, f"{path}.root.entries[{i}]")
                   for i, e in enumerate(raw_entries)]
        stubs = d.get("stubs", {})
        _require(isinstance(stubs, dict), f"{path}.stubs", "must be an object")
        return cls(host, port, http_port, firewall_text, indexed, max_history,
                   root_name, entries, stubs)


def parse_entry_def(d: dict, path: str):
    """Turn one config entry definition into (Entry, child definitions)."""
    _require(isinstance(d, dict), path, "must be an object")
    name = d.get("name")
    _require(isinstance(name, str) and valid_name(name), f"{path}.name", "entry name")
    kind = d.get("kind", DOCUMENT)
    meta = d.get("meta", {})
    _require(isinstance(meta, dict) and all(isinstance(k, str) and isinstance(v, str)
                                            for k, v in meta.items()),
             f"{path}.meta", "string map")
    if kind == DOCUMENT:
        if "content_b64" in d:
            try:
                content = base64.b64decode(d["content_b64"], validate=True)
            except Exception:
                raise ConfigError(f"{path}.content_b64", "not base64")
        else:
            text = d.get("content_text", "")
            _require(isinstance(text, str), f"{path}.content_text", "string")
            content = text.encode("utf-8")
        media = d.get("media_type", "text/plain")
        _require(isinstance(media, str), f"{path}.media_type", "string")
        return document_entry(name, content, media, meta=meta), None
    if kind == PORT:
        b = d.get("behavior")
        _require(isinstance(b, str) and b, f"{path}.behavior", "required string")
        _require(b in BEHAVIORS, f"{path}.behavior", f"unknown behavior {b!r}")
        config = d.get("config", {})
        _require(isinstance(config, dict) and all(isinstance(k, str) and isinstance(v, str)
                                                  for k, v in config.items()),
                 f"{path}.config", "string map")
        try:
            inp = parse_filter(d.get("input_filter", "true"))
            outp = parse_filter(d.get("output_filter", "true"))
        except FilterError as e:
            raise ConfigError(path, f"filter does not parse: {e}")
        cursor = d.get("cursor", 1)
        _require(isinstance(cursor, int) and cursor >= 1, f"{path}.cursor", "positive integer")
        priority = d.get("priority", 0)
        _require(isinstance(priority, int) and not isinstance(priority, bool),
                 f"{path}.priority", "integer")
        spec = PortSpec(b, dict(config), inp, outp,
                        receive_flag=bool(d.get("receive_flag", False)),
                        cursor=cursor, priority=priority)
        return port_entry(name, spec, meta=meta), None
    if kind == NODE:
        children = d.get("entries", [])
        _require(isinstance(children, list), f"{path}.entries", "must be a list")
        parsed = [parse_entry_def(e, f"{path}.entries[{i}]")
                  for i, e in enumerate(children)]
        return node_entry(name, meta=meta), parsed
    raise ConfigError(f"{path}.kind", f"unknown kind {kind!r}")


class Server:
    def __init__(self, config: ServerConfig, network=None, clock=None,
                 tracer=None, real: bool = False):
        self.config = config
        self.network = network
        self.real = real
        self.clock = clock or (lambda: int(time.time() * 1000))
        self.tracer = tracer
        self.nodes: dict[tuple, Node] = {}
        self.behaviors: dict[tuple, object] = {}
        self._behavior_order: list[tuple] = []
        self.inbound: queue.Queue = queue.Queue()
        self.conns: dict[int, object] = {}
        self.stubs: dict[str, object] = {}
        self._query_counter = 0
        self._node_ring: list[tuple] = []
        self._node_next = 0
        self.listener = None
        self.httpd = None
        self._driver: threading.Thread | None = None
        self._stopping = False
        self.advertised_port = config.npc_tcp_port
        self._boot()
        if network is not None:
            network.register(config.host, self.advertised_port, self)

    # -- identity ---------------------------------------------------------------

    def describe(self) -> str:
        return f"{self.config.host}:{self.advertised_port}"

    def next_name(self, prefix: str) -> str:
        self._query_counter += 1
        return f"{prefix}-{self._query_counter}"

    def url_for(self, node: Node) -> EntryUrl:
        return EntryUrl(self.config.host, self.advertised_port, node.path)

    @property
    def root(self) -> Node:
        return self.nodes[(self.config.root_name,)]

    @property
    def host(self) -> str:
        return self.config.host

    def _trace(self, action: str, detail: str) -> None:
        if self.tracer is not None:
            self.tracer.record(self.describe(), action, detail)

    # -- boot ---------------------------------------------------------------------

    def _make_node(self, path: tuple) -> Node:
        node = Node(path=path, clock=self.clock, max_history=self.config.max_history,
                    indexed=self.config.indexed, tracer=self.tracer)
        node.actor_base = self.config.host
        node.on_port_inserted = lambda entry, n=node: self._spawn_port(n, entry)
        node.on_port_removed = lambda name, entry, n=node: self._stop_port(n, name)
        node.on_node_inserted = lambda entry, n=node: self._bind_subnode(n, entry)
        self.nodes[path] = node
        self._node_ring.append(path)
        return node

    def _boot(self) -> None:
        for name, spec in self.config.stubs.items():
            kind = spec.get("type") if isinstance(spec, dict) else None
            if kind == "mail":
                self.stubs[name] = MailStub(name)
            elif kind == "repo":
                repo = RepoStub(name)
                for i, doc in enumerate(spec.get("documents", [])):
                    entry, _ = parse_entry_def(doc, f"config.stubs.{name}.documents[{i}]")
                    repo.add(entry)
                self.stubs[name] = repo
            else:
                raise ConfigError(f"config.stubs.{name}", f"unknown stub type {kind!r}")
        root = self._make_node((self.config.root_name,))
        self._populate(root, self.config.entries)

    def _populate(self, node: Node, defs: list) -> None:
        for entry, children in defs:
            node.post_event(NODE_ORIGIN, insert_event(entry))
            if children is not None:
                child = self.nodes[node.path + (entry.name,)]
                self._populate(child, children)

    def _bind_subnode(self, parent: Node, entry: Entry) -> None:
        path = parent.path + (entry.name,)
        if path not in self.nodes:
            child = self._make_node(path)
            if hasattr(entry.payload, "node"):
                entry.payload.node = child

    # -- behaviors -------------------------------------------------------------------

    def _spawn_port(self, node: Node, entry: Entry) -> None:
        cls = BEHAVIORS.get(entry.payload.behavior)
        if cls is None:
            self._trace("spawn-failed", f"{node.path_text}:{entry.name} "
                                        f"unknown behavior {entry.payload.behavior!r}")
            return
        attachment = node.attachments.pop(entry.name, None)
        ctx = PortContext(self, node, entry.name, attachment)
        b = cls(ctx)
        key = (node.path, entry.name)
        self.behaviors[key] = b
        self._behavior_order.append(key)
        node.sinks[entry.name] = b.on_event
        if entry.payload.receive_flag:
            node.create_default_subscription(entry.name, entry.payload)
        if attachment and "conn" in attachment:
            attachment["conn"].owner = key
        b.on_start()

    def _stop_port(self, node: Node, name: str) -> None:
        key = (node.path, name)
        b = self.behaviors.pop(key, None)
        if key in self._behavior_order:
            self._behavior_order.remove(key)
        if b is not None:
            b.on_stop("removed")
        for conn in [c for c in self.conns.values() if c.owner == key]:
            self.release_conn(conn)

    def behavior_at(self, path: tuple, name: str):
        return self.behaviors.get((path, name))

    # -- connections --------------------------------------------------------------------

    def enqueue(self, conn, msg: dict) -> None:
        self.inbound.put((conn, msg))

    def accept_conn(self, conn, peer_host: str | None = None) -> bool:
        if peer_host is not None and not self.allow_inbound(peer_host, self.advertised_port,
                                                            "npc-tcp"):
            conn.close()
            return False
        self.conns[conn.id] = conn
        self._trace("accept", conn.label)
        return True

    def allow_inbound(self, host: str, port: int, protocol: str) -> bool:
        allowed = check(self.config.rules, IN, host, port, protocol)
        if not allowed:
            self._trace("refuse", f"in {host}:{port} {protocol}")
        return allowed

    def dial(self, url_text: str, owner: tuple | None = None):
        try:
            url = parse_url(url_text)
        except UrlError:
            self._trace("dial-failed", f"bad url {url_text!r}")
            return None
        rules = list(self.config.rules)
        if owner is not None:
            node = self.nodes.get(owner[0])
            entry = node.entries.get(owner[1]) if node is not None else None
            if entry is not None and "firewall" in entry.meta:
                try:
                    rules += parse_rules(entry.meta["firewall"])
                except FirewallError as e:
                    # a port with broken rules dials nothing
                    self._trace("refuse", f"bad port rules on {owner[1]}: {e}")
                    return None
        if not check(rules, OUT, url.host, url.tcp_port, "npc-tcp"):
            self._trace("refuse", f"out {url.host}:{url.tcp_port} npc-tcp")
            return None
        conn = None
        if self.network is not None:
            conn = self.network.connect(self, url.host, url.tcp_port)
        if conn is None and self.real:
            try:
                conn = dial_tcp(url.host, url.tcp_port, self.enqueue)
            except OSError:
                conn = None
        if conn is None:
            self._trace("dial-failed", f"{url.host}:{url.tcp_port} unreachable")
            return None
        conn.owner = owner
        self.conns[conn.id] = conn
        conn.send({"kind": HELLO, "target": url.text()})
        self._trace("send", f"hello -> {url.text()}")
        return conn

    def release_conn(self, conn) -> None:
        self.conns.pop(conn.id, None)
        conn.close()

    def transfer_conn(self, conn, path: tuple, port_name: str) -> None:
        conn.owner = (path, port_name)

    def stub(self, name: str, requester: str = ""):
        s = self.stubs.get(name)
        if s is None:
            return None
        if not check(self.config.rules, OUT, name, 1, "stub"):
            self._trace("refuse", f"out {name}:1 stub (from {requester})")
            return None
        return s

    # -- inbound dispatch ---------------------------------------------------------------

    def run_soon(self, fn) -> None:
        """Run ``fn`` on the driving thread; gateways use this so node state
        is only ever touched from one place."""
        self.inbound.put((None, fn))

    def _dispatch(self, item) -> None:
        conn, msg = item
        if conn is None and callable(msg):
            msg()
        else:
            self.handle_message(conn, msg)

    def pump(self) -> int:
        """Handle every queued inbound message; returns how many."""
        handled = 0
        while True:
            try:
                item = self.inbound.get_nowait()
            except queue.Empty:
                return handled
            self._dispatch(item)
            handled += 1

    def handle_message(self, conn, msg: dict) -> None:
        kind = msg.get("kind")
        self._trace("recv", f"{kind} on {conn.label}")
        if kind == BYE:
            self._handle_bye(conn)
            return
        if conn.owner is None:
            if kind == HELLO:
                self._handle_hello(conn, msg)
            else:
                conn.send({"kind": ERROR, "code": "no-hello",
                           "message": "first frame must be hello"})
                self.release_conn(conn)
            return
        b = self.behaviors.get(conn.owner)
        if b is None:
            conn.send({"kind": ERROR, "code": "not-found",
                       "message": "owning port is gone"})
            return
        b.on_external(conn, msg)

    def _handle_hello(self, conn, msg: dict) -> None:
        target = msg.get("target")
        try:
            url = parse_url(target if isinstance(target, str) else "")
        except UrlError:
            conn.send({"kind": ERROR, "code": "not-found", "message": f"bad target {target!r}"})
            self.release_conn(conn)
            return
        if len(url.path) < 2:
            conn.send({"kind": ERROR, "code": "not-found",
                       "message": "hello target must be a port"})
            self.release_conn(conn)
            return
        node = self.nodes.get(url.path[:-1])
        port_name = url.name
        key = (url.path[:-1], port_name)
        if node is None or key not in self.behaviors:
            conn.send({"kind": ERROR, "code": "not-found", "message": f"no port at {target}"})
            self.release_conn(conn)
            return
        conn.owner = key
        conn.send({"kind": HELLO, "node": self.url_for(node).text()})

    def _handle_bye(self, conn) -> None:
        conn.closed = True
        if conn.owner is not None:
            b = self.behaviors.get(conn.owner)
            if b is not None:
                b.on_external(conn, {"kind": BYE})
        self.conns.pop(conn.id, None)

    # -- driving ------------------------------------------------------------------------

    def deliver_step(self) -> bool:
        """One delivery somewhere in the tree, fair across nodes."""
        ring = list(self._node_ring)
        n = len(ring)
        for i in range(n):
            path = ring[(self._node_next + i) % n]
            node = self.nodes.get(path)
            if node is None:
                continue
            if node.deliver_step() is not None:
                self._node_next = (ring.index(path) + 1) % n
                return True
        return False

    def drain(self, limit: int = 100000) -> int:
        steps = 0
        while steps < limit and self.deliver_step():
            steps += 1
        return steps

    def step_behaviors(self) -> int:
        did = 0
        for key in list(self._behavior_order):
            b = self.behaviors.get(key)
            if b is not None and b.step():
                did += 1
        return did

    def tick_timers(self, now: int | None = None) -> int:
        t = self.clock() if now is None else now
        fired = 0
        for node in list(self.nodes.values()):
            fired += len(node.tick(t))
        return fired

    def settle(self, limit: int = 100000) -> int:
        """Pump, drain, and step until nothing moves. Single-server only;
        multi-server setups settle through the sim loop."""
        total = 0
        while total <= limit:
            did = self.pump()
            did += self.drain(limit)
            did += self.step_behaviors()
            total += did
            if did == 0:
                return total
        raise RuntimeError("server did not settle within limit")

    # -- real mode ----------------------------------------------------------------------

    def start(self) -> None:
        """Bind sockets and run the driver loop on a background thread."""
        from .gateways import TcpListener
        from .httpd import HttpFacade
        self.listener = TcpListener("0.0.0.0", self.config.npc_tcp_port, self)
        self.advertised_port = self.listener.port if self.config.npc_tcp_port == 0 \
            else self.config.npc_tcp_port
        self.listener.start()
        if self.config.http_port is not None:
            self.httpd = HttpFacade(self, "0.0.0.0", self.config.http_port)
            self.httpd.start()
        self._driver = threading.Thread(target=self._drive, daemon=True)
        self._driver.start()

    def _drive(self) -> None:
        while not self._stopping:
            try:
                item = self.inbound.get(timeout=0.05)
                self._dispatch(item)
            except queue.Empty:
                pass
            self.pump()
            self.drain()
            self.step_behaviors()
            self.tick_timers()

    def stop(self) -> None:
        self._stopping = True
        if self.listener is not None:
            self.listener.stop()
        if self.httpd is not None:
            self.httpd.stop()
        if self._driver is not None:
            self._driver.join(timeout=2)

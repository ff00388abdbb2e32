"""Shared generators and reference implementations for the test suite.

Property tests draw from per-test seeded Random instances so a failing run
reproduces exactly.  The oracles here are deliberately naive: a recursive
glob matcher and a replay of the cancellation rules, kept simple enough to
be obviously correct.
"""

import random
import zlib

import pytest

from npckit.filters import And, BoolLit, Cmp, Not, Or
from npckit.history import (CLOSE, INSERT, REMOVE, RESUME, SUSPEND, TIME, Event)
from npckit.model import (DOCUMENT, NODE, PORT, PortSpec, document_entry,
                          node_entry, port_entry)


@pytest.fixture
def rng(request):
    # crc32 of the test name, not hash(): hash() is salted per process
    return random.Random(zlib.crc32(request.node.name.encode()))


# ---------------------------------------------------------------------------
# generators

NAMES = ["alpha", "beta", "gamma", "news-42", "a.b.c", "x", "report_7", "in", "out"]
PORTS = ["in", "out", "admin", "fwd", "watch-1"]
SUBS = ["default", "docs", "s1"]
LABELS = [None, "tick", "digest", "exclusive"]
META_KEYS = ["topic", "rank", "reply-to", "exclusive"]
META_VALUES = ["", "news", "sports", "1", "12", "3", "true", "alpha", "out"]

FIELDS = ["event.type", "event.port", "event.subscription", "event.label",
          "entry.name", "entry.kind", "meta.topic", "meta.rank", "meta.reply-to"]
OPS = ["==", "!=", "matches", "<", "<=", ">", ">="]
LITERALS = ["Insert", "Remove", "Resume", "Time", "document", "port", "node",
            "alpha", "beta", "news-*", "?eta", "a.b.c", "", "42", "-7", "007",
            "12", "tick", 'he said "hi"', "back\\slash", "in", "out"]


def rand_filter(rng, depth=3):
    """Random filter AST; leans on atoms so most draws are satisfiable."""
    roll = rng.random()
    if depth <= 0 or roll < 0.45:
        if rng.random() < 0.12:
            return BoolLit(rng.random() < 0.5)
        return Cmp(rng.choice(FIELDS), rng.choice(OPS), rng.choice(LITERALS))
    if roll < 0.6:
        return Not(rand_filter(rng, depth - 1))
    if roll < 0.8:
        return And(rand_filter(rng, depth - 1), rand_filter(rng, depth - 1))
    return Or(rand_filter(rng, depth - 1), rand_filter(rng, depth - 1))


def rand_entry(rng, name=None):
    name = name or rng.choice(NAMES)
    meta = {}
    for key in META_KEYS:
        if rng.random() < 0.3:
            meta[key] = rng.choice(META_VALUES)
    kind = rng.choice([DOCUMENT, DOCUMENT, DOCUMENT, PORT, NODE])
    if kind == DOCUMENT:
        return document_entry(name, rng.randbytes(rng.randrange(0, 12)), meta=meta)
    if kind == PORT:
        return port_entry(name, PortSpec("manual"), meta=meta)
    return node_entry(name, meta=meta)


def rand_event(rng):
    """Random unstamped event covering every field a filter can read."""
    kind = rng.choice([INSERT, INSERT, REMOVE, TIME, RESUME, CLOSE, SUSPEND])
    origin = rng.choice(PORTS + ["@node"])
    if kind in (INSERT, REMOVE):
        return Event(kind, origin_port=origin, entry=rand_entry(rng))
    if kind == TIME:
        return Event(kind, origin_port="@node", label=rng.choice([l for l in LABELS if l]))
    return Event(kind, origin_port=origin, subscription=rng.choice(SUBS))


def _escape(s):
    return s.replace("\\", "\\\\").replace('"', '\\"')


def loose_text(rng, e):
    """Render an AST to source with randomized spacing and redundant
    parentheses, to prod the parser with inputs the printer never emits."""
    sp = lambda: " " * rng.randrange(0, 3)

    def wrap(text):
        if rng.random() < 0.4:
            return "(" + sp() + text + sp() + ")"
        return text

    if isinstance(e, BoolLit):
        return wrap("true" if e.value else "false")
    if isinstance(e, Cmp):
        pad = sp() if e.op != "matches" else " " + sp()
        text = e.field + pad + e.op + pad + '"' + _escape(e.literal) + '"'
        return wrap(text)
    if isinstance(e, Not):
        return wrap("not " + sp() + _force_parens(rng, e.operand))
    word = " and " if isinstance(e, And) else " or "
    text = _force_parens(rng, e.left) + sp() + word + sp() + _force_parens(rng, e.right)
    return wrap(text)


def _force_parens(rng, e):
    text = loose_text(rng, e)
    if isinstance(e, (And, Or, Not)):
        return "(" + text + ")"
    return text


# ---------------------------------------------------------------------------
# oracles

def glob_oracle(pattern, text):
    """Reference glob matcher: * spans any run, ? one character."""
    if not pattern:
        return not text
    head, rest = pattern[0], pattern[1:]
    if head == "*":
        return any(glob_oracle(rest, text[i:]) for i in range(len(text) + 1))
    if not text:
        return False
    if head == "?":
        return glob_oracle(rest, text[1:])
    return text[0] == head and glob_oracle(rest, text[1:])


def replay_live(events):
    """Reference cancellation: a Remove deletes every earlier live Insert of
    the same entry name, a Close deletes every earlier live Resume by the
    same port and subscription; everything else just accumulates."""
    live = []
    for ev in events:
        if ev.kind == REMOVE and ev.entry is not None:
            live = [e for e in live
                    if not (e.kind == INSERT and e.entry is not None
                            and e.entry.name == ev.entry.name)]
        elif ev.kind == CLOSE:
            live = [e for e in live
                    if not (e.kind == RESUME and e.origin_port == ev.origin_port
                            and e.subscription == ev.subscription)]
        live.append(ev)
    return live

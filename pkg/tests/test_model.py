"""Entry names, URLs, and entry validation."""

import pytest

from npckit.filters import TRUE
from npckit.model import (Document, Entry, EntryUrl, NodeRef, PortSpec, UrlError,
                          document_entry, node_entry, parse_url, port_entry,
                          valid_name, validate_entry)


def test_valid_names():
    for name in ["a", "A-1", "report.2024_v2", "x" * 128]:
        assert valid_name(name)
    for name in ["", "a b", "a/b", "x" * 129, "päge", "a:b", 7]:
        assert not valid_name(name)


def test_parse_url_roundtrip():
    u = parse_url("npc://Example.ORG:7070/root/sub/doc-1")
    assert u.host == "example.org"
    assert u.tcp_port == 7070
    assert u.path == ("root", "sub", "doc-1")
    assert u.text() == "npc://example.org:7070/root/sub/doc-1"
    assert parse_url(u.text()) == u


def test_url_navigation():
    u = parse_url("npc://h:1/a/b/c")
    assert u.name == "c"
    assert u.parent().path == ("a", "b")
    assert u.child("d", "e").path == ("a", "b", "c", "d", "e")
    with pytest.raises(UrlError):
        parse_url("npc://h:1/a").parent()


@pytest.mark.parametrize("bad", [
    "http://h:1/a",
    "npc://h/a",
    "npc://h:0/a",
    "npc://h:65536/a",
    "npc://h:1",
    "npc://h:1/",
    "npc://h:1//a",
    "npc://h:1/a b",
    "npc:/h:1/a",
    "",
])
def test_parse_url_rejects(bad):
    with pytest.raises(UrlError):
        parse_url(bad)


def test_entry_helpers_pair_kind_and_payload():
    d = document_entry("d", b"body", "text/plain")
    assert d.kind == "document" and d.payload == Document(b"body", "text/plain")
    n = node_entry("n")
    assert n.kind == "node" and isinstance(n.payload, NodeRef)
    p = port_entry("p", PortSpec("manual"))
    assert p.kind == "port" and p.payload.behavior == "manual"
    assert validate_entry(d) == []
    assert validate_entry(n) == []
    assert validate_entry(p) == []


def test_validate_entry_name_and_kind():
    assert validate_entry(Entry("bad name", {}, "document", Document(b"")))
    assert validate_entry(Entry("ok", {}, "widget", Document(b"")))
    # payload must match the kind
    assert validate_entry(Entry("ok", {}, "document", PortSpec("manual")))
    assert validate_entry(Entry("ok", {}, "port", Document(b"")))


def test_validate_entry_reserved_meta_shapes():
    good = document_entry("d", b"", meta={
        "origin-node": "npc://other.example:7070/root",
        "priority": "-3",
        "reply-to": "query1",
        "input-filter": 'event.type == "Insert"',
    })
    assert validate_entry(good) == []
    assert validate_entry(document_entry("d", b"", meta={"origin-node": "nope"}))
    assert validate_entry(document_entry("d", b"", meta={"priority": "high"}))
    assert validate_entry(document_entry("d", b"", meta={"reply-to": "a/b"}))
    assert validate_entry(document_entry("d", b"", meta={"output-filter": "not ("}))


def test_validate_entry_meta_must_be_string_map():
    bad = Entry("d", {"rank": 3}, "document", Document(b""))
    assert validate_entry(bad)


def test_validate_port_entry_specifics():
    assert validate_entry(port_entry("p", PortSpec(""))) != []
    assert validate_entry(port_entry("p", PortSpec("manual", cursor=0))) != []
    ok = port_entry("p", PortSpec("forwarder", cursor=5, input_filter=TRUE))
    assert validate_entry(ok) == []

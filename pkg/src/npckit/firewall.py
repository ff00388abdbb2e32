"""Connection filtering for servers and dialing channels.

Rules are lines of the form::

    allow|deny in|out <host-glob>:<port>[-<port>] <protocol>

where the port part may be ``*`` for any port and the protocol may be a
name or ``*``.  The first matching rule decides; with no match the
connection is allowed.  Inbound checks see the remote host and the local
port, outbound checks the dialed host and port.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .filters import glob_match

IN = "in"
OUT = "out"


class FirewallError(Exception):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


@dataclass(frozen=True)
class Rule:
    allow: bool
    direction: str
    host_glob: str
    port_low: int
    port_high: int
    protocol: str

    def matches(self, direction: str, host: str, port: int, protocol: str) -> bool:
        if self.direction != direction:
            return False
        if not glob_match(self.host_glob, host.lower()):
            return False
        if not self.port_low <= port <= self.port_high:
            return False
        return self.protocol == "*" or self.protocol == protocol


_PORT_RE = re.compile(r"(\*|[0-9]+(?:-[0-9]+)?)")


def parse_rules(text: str) -> list[Rule]:
    """Parse rule text, one rule per line; blank lines and # comments are
    skipped.  Raises FirewallError naming the first offending line."""
    rules: list[Rule] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FirewallError("bad-rule", f"line {lineno}: expected 4 fields, got {len(parts)}")
        action, direction, target, protocol = parts
        if action not in ("allow", "deny"):
            raise FirewallError("bad-rule", f"line {lineno}: unknown action {action!r}")
        if direction not in (IN, OUT):
            raise FirewallError("bad-rule", f"line {lineno}: unknown direction {direction!r}")
        host, sep, port_text = target.rpartition(":")
        if not sep or not host:
            raise FirewallError("bad-rule", f"line {lineno}: target needs host:port")
        if not _PORT_RE.fullmatch(port_text):
            raise FirewallError("bad-rule", f"line {lineno}: bad port {port_text!r}")
        if port_text == "*":
            low, high = 1, 65535
        elif "-" in port_text:
            low_text, high_text = port_text.split("-", 1)
            low, high = int(low_text), int(high_text)
        else:
            low = high = int(port_text)
        if not (1 <= low <= 65535 and 1 <= high <= 65535 and low <= high):
            raise FirewallError("bad-rule", f"line {lineno}: port range {port_text!r}")
        rules.append(Rule(action == "allow", direction, host.lower(), low, high, protocol))
    return rules


def check(rules: list[Rule], direction: str, host: str, port: int, protocol: str) -> bool:
    """True when the connection may proceed. First match wins; default allow."""
    for rule in rules:
        if rule.matches(direction, host, port, protocol):
            return rule.allow
    return True

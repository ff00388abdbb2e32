"""Boolean filter expressions over events and the entries they carry.

Filters are the access control and routing language of the kit: every port
owns an input and an output filter, subscriptions add dynamic filters, and
pull requests ship a filter to the far side of a channel.

Grammar (whitespace insignificant, keywords lowercase and case sensitive)::

    expr  := or
    or    := and ("or" and)*
    and   := unary ("and" unary)*
    unary := "not" unary | "(" expr ")" | atom
    atom  := "true" | "false" | FIELD OP STRING

``FIELD`` is one of ``event.type``, ``event.port``, ``event.subscription``,
``event.label``, ``entry.name``, ``entry.kind``, or ``meta.<key>`` which
reads the metadata of the entry the event carries.  ``OP`` is ``==``, ``!=``,
``matches`` (glob with ``*`` and ``?`` wildcards only), or one of the ordered
comparisons ``<``, ``<=``, ``>``, ``>=``.  Ordered comparisons are numeric
when both sides parse as decimal integers and bytewise lexicographic
otherwise.  String literals are double quoted; ``\\"`` and ``\\\\`` are the
only escapes.

A field that is missing on the evaluated event (no entry, no such metadata
key, no label) reads as the empty string, so evaluation is total: any filter
can be evaluated against any event without errors.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache


class FilterError(Exception):
    """Raised for unparseable filter text.

    ``code`` is one of ``syntax-error``, ``unknown-field``,
    ``unknown-operator``; ``offset`` is the byte offset of the offending
    token in the source text.
    """

    def __init__(self, code: str, offset: int, message: str):
        super().__init__(f"{code} at {offset}: {message}")
        self.code = code
        self.offset = offset


@dataclass(frozen=True)
class BoolLit:
    value: bool


@dataclass(frozen=True)
class Cmp:
    field: str
    op: str
    literal: str


@dataclass(frozen=True)
class Not:
    operand: "FilterExpr"


@dataclass(frozen=True)
class And:
    left: "FilterExpr"
    right: "FilterExpr"


@dataclass(frozen=True)
class Or:
    left: "FilterExpr"
    right: "FilterExpr"


FilterExpr = BoolLit | Cmp | Not | And | Or

TRUE = BoolLit(True)
FALSE = BoolLit(False)

EVENT_FIELDS = frozenset(
    ["event.type", "event.port", "event.subscription", "event.label", "entry.name", "entry.kind"]
)
OPS = frozenset(["==", "!=", "matches", "<", "<=", ">", ">="])

_WORD_RE = re.compile(r"[A-Za-z0-9._-]+")
_INT_RE = re.compile(r"-?[0-9]+")


# ---------------------------------------------------------------------------
# tokenizer

_T_WORD = "word"
_T_OP = "op"
_T_STR = "str"
_T_LPAREN = "("
_T_RPAREN = ")"
_T_EOF = "eof"


@dataclass
class _Token:
    kind: str
    text: str
    pos: int


def _tokenize(src: str) -> list[_Token]:
    toks: list[_Token] = []
    i, n = 0, len(src)
    while i < n:
        c = src[i]
        if c in " \t\r\n":
            i += 1
            continue
        if c == "(":
            toks.append(_Token(_T_LPAREN, c, i))
            i += 1
        elif c == ")":
            toks.append(_Token(_T_RPAREN, c, i))
            i += 1
        elif c == '"':
            j = i + 1
            out = []
            while True:
                if j >= n:
                    raise FilterError("syntax-error", i, "unterminated string literal")
                ch = src[j]
                if ch == "\\":
                    if j + 1 >= n or src[j + 1] not in ('"', "\\"):
                        raise FilterError("syntax-error", j, "invalid escape")
                    out.append(src[j + 1])
                    j += 2
                elif ch == '"':
                    j += 1
                    break
                else:
                    out.append(ch)
                    j += 1
            toks.append(_Token(_T_STR, "".join(out), i))
            i = j
        elif c == "=":
            if src.startswith("==", i):
                toks.append(_Token(_T_OP, "==", i))
                i += 2
            else:
                raise FilterError("unknown-operator", i, "expected ==")
        elif c == "!":
            if src.startswith("!=", i):
                toks.append(_Token(_T_OP, "!=", i))
                i += 2
            else:
                raise FilterError("unknown-operator", i, "expected !=")
        elif c in "<>":
            if i + 1 < n and src[i + 1] == "=":
                toks.append(_Token(_T_OP, src[i : i + 2], i))
                i += 2
            else:
                toks.append(_Token(_T_OP, c, i))
                i += 1
        else:
            m = _WORD_RE.match(src, i)
            if not m:
                raise FilterError("syntax-error", i, f"unexpected character {c!r}")
            toks.append(_Token(_T_WORD, m.group(), i))
            i = m.end()
    toks.append(_Token(_T_EOF, "", n))
    return toks


# ---------------------------------------------------------------------------
# parser

class _Parser:
    def __init__(self, src: str):
        self.toks = _tokenize(src)
        self.i = 0

    def peek(self) -> _Token:
        return self.toks[self.i]

    def take(self) -> _Token:
        t = self.toks[self.i]
        self.i += 1
        return t

    def parse(self) -> FilterExpr:
        e = self.parse_or()
        t = self.peek()
        if t.kind != _T_EOF:
            raise FilterError("syntax-error", t.pos, f"unexpected {t.text!r}")
        return e

    def parse_or(self) -> FilterExpr:
        e = self.parse_and()
        while self.peek().kind == _T_WORD and self.peek().text == "or":
            self.take()
            e = Or(e, self.parse_and())
        return e

    def parse_and(self) -> FilterExpr:
        e = self.parse_unary()
        while self.peek().kind == _T_WORD and self.peek().text == "and":
            self.take()
            e = And(e, self.parse_unary())
        return e

    def parse_unary(self) -> FilterExpr:
        t = self.peek()
        if t.kind == _T_WORD and t.text == "not":
            self.take()
            return Not(self.parse_unary())
        if t.kind == _T_LPAREN:
            self.take()
            e = self.parse_or()
            closing = self.take()
            if closing.kind != _T_RPAREN:
                raise FilterError("syntax-error", closing.pos, "expected )")
            return e
        return self.parse_atom()

    def parse_atom(self) -> FilterExpr:
        t = self.take()
        if t.kind != _T_WORD:
            raise FilterError("syntax-error", t.pos, f"expected atom, got {t.text!r}")
        if t.text == "true":
            return TRUE
        if t.text == "false":
            return FALSE
        field = t.text
        if field not in EVENT_FIELDS and not (field.startswith("meta.") and len(field) > 5):
            raise FilterError("unknown-field", t.pos, field)
        op = self.take()
        if op.kind == _T_WORD:
            if op.text != "matches":
                raise FilterError("unknown-operator", op.pos, op.text)
            opname = "matches"
        elif op.kind == _T_OP:
            opname = op.text
        else:
            raise FilterError("syntax-error", op.pos, "expected operator")
        lit = self.take()
        if lit.kind != _T_STR:
            raise FilterError("syntax-error", lit.pos, "expected string literal")
        return Cmp(field, opname, lit.text)


def parse_filter(src: str) -> FilterExpr:
    """Parse filter text into an expression tree."""
    return _Parser(src).parse()


# ---------------------------------------------------------------------------
# printer

def _escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace('"', '\\"')


def _wrap(e: FilterExpr) -> str:
    if isinstance(e, (BoolLit, Cmp)):
        return print_filter(e)
    return "(" + print_filter(e) + ")"


def print_filter(e: FilterExpr) -> str:
    """Render an expression tree as fully parenthesized filter text.

    ``parse_filter(print_filter(e)) == e`` holds for every tree.
    """
    if isinstance(e, BoolLit):
        return "true" if e.value else "false"
    if isinstance(e, Cmp):
        return f'{e.field} {e.op} "{_escape(e.literal)}"'
    if isinstance(e, Not):
        return "not " + _wrap(e.operand)
    if isinstance(e, And):
        return _wrap(e.left) + " and " + _wrap(e.right)
    if isinstance(e, Or):
        return _wrap(e.left) + " or " + _wrap(e.right)
    raise TypeError(f"not a filter expression: {e!r}")


# ---------------------------------------------------------------------------
# evaluation

@lru_cache(maxsize=4096)
def _glob_re(pattern: str) -> re.Pattern:
    parts = []
    for ch in pattern:
        if ch == "*":
            parts.append(".*")
        elif ch == "?":
            parts.append(".")
        else:
            parts.append(re.escape(ch))
    return re.compile("".join(parts), re.DOTALL)


def glob_match(pattern: str, text: str) -> bool:
    """Glob match where ``*`` spans any run and ``?`` any single character."""
    return _glob_re(pattern).fullmatch(text) is not None


def _field_value(ev, field: str) -> str:
    # Missing pieces read as "" so that evaluation is total.
    if field == "event.type":
        return ev.kind or ""
    if field == "event.port":
        return ev.origin_port or ""
    if field == "event.subscription":
        return ev.subscription or ""
    if field == "event.label":
        return ev.label or ""
    entry = getattr(ev, "entry", None)
    if entry is None:
        return ""
    if field == "entry.name":
        return entry.name or ""
    if field == "entry.kind":
        return entry.kind or ""
    if field.startswith("meta."):
        return entry.meta.get(field[5:], "")
    return ""


def _compare(op: str, left: str, right: str) -> bool:
    if op == "==":
        return left == right
    if op == "!=":
        return left != right
    if op == "matches":
        return glob_match(right, left)
    if _INT_RE.fullmatch(left) and _INT_RE.fullmatch(right):
        a, b = int(left), int(right)
    else:
        a, b = left, right  # type: ignore[assignment]
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    if op == ">=":
        return a >= b
    raise ValueError(f"unknown operator {op!r}")


def eval_filter(e: FilterExpr, ev) -> bool:
    """Evaluate a filter against an event-shaped object.

    The object needs ``kind``, ``origin_port``, ``subscription``, ``label``
    and an optional ``entry`` with ``name``, ``kind``, ``meta``.
    """
    if isinstance(e, BoolLit):
        return e.value
    if isinstance(e, Cmp):
        return _compare(e.op, _field_value(ev, e.field), e.literal)
    if isinstance(e, Not):
        return not eval_filter(e.operand, ev)
    if isinstance(e, And):
        return eval_filter(e.left, ev) and eval_filter(e.right, ev)
    if isinstance(e, Or):
        return eval_filter(e.left, ev) or eval_filter(e.right, ev)
    raise TypeError(f"not a filter expression: {e!r}")


# ---------------------------------------------------------------------------
# plain port detection

def _flatten_and(e: FilterExpr) -> list[FilterExpr]:
    if isinstance(e, And):
        return _flatten_and(e.left) + _flatten_and(e.right)
    return [e]


def _is_doc_type_atom(e: FilterExpr) -> bool:
    if isinstance(e, Cmp):
        return e.field == "event.type" and e.op == "==" and e.literal in ("Insert", "Remove")
    if isinstance(e, Or):
        return _is_doc_type_atom(e.left) and _is_doc_type_atom(e.right)
    return False


def _is_doc_kind_atom(e: FilterExpr) -> bool:
    if isinstance(e, Cmp):
        return e.field == "entry.kind" and e.op == "==" and e.literal == "document"
    if isinstance(e, Or):
        return _is_doc_kind_atom(e.left) and _is_doc_kind_atom(e.right)
    return False


def _contained_in_plain(e: FilterExpr) -> bool:
    conj = _flatten_and(e)
    if any(c == FALSE for c in conj):
        return True  # admits nothing, trivially contained
    return any(_is_doc_type_atom(c) for c in conj) and any(_is_doc_kind_atom(c) for c in conj)


def is_plain(spec) -> bool:
    """Conservative syntactic check that a port can only see and produce
    Insert or Remove events for document entries.

    Containment is structural: each filter must be a conjunction carrying an
    ``event.type`` atom restricted to Insert or Remove and an
    ``entry.kind == "document"`` atom (a literal ``false`` branch counts,
    since it admits nothing).  Filters that are semantically contained but
    written differently are reported as not plain.
    """
    return _contained_in_plain(spec.input_filter) and _contained_in_plain(spec.output_filter)


# ---------------------------------------------------------------------------
# filter index

def filter_event_types(e: FilterExpr) -> set[str] | None:
    """Event types a filter can possibly match, from positive ``event.type``
    equality atoms; ``None`` means no restriction was derivable."""
    if isinstance(e, BoolLit):
        return set() if not e.value else None
    if isinstance(e, Cmp):
        if e.field == "event.type" and e.op == "==":
            return {e.literal}
        return None
    if isinstance(e, Not):
        return None
    if isinstance(e, And):
        l, r = filter_event_types(e.left), filter_event_types(e.right)
        if l is None:
            return r
        if r is None:
            return l
        return l & r
    if isinstance(e, Or):
        l, r = filter_event_types(e.left), filter_event_types(e.right)
        if l is None or r is None:
            return None
        return l | r
    raise TypeError(f"not a filter expression: {e!r}")


class FilterIndexError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class FilterIndex:
    """Routes events to the registered filters that match them.

    Acceleration is keyed on positive ``event.type`` equality atoms only;
    candidates are always confirmed with a full evaluation, so the result is
    identical to scanning every registered filter.
    """

    def __init__(self):
        self._filters: dict = {}
        self._typed: dict[str, set] = {}
        self._any: set = set()

    def register(self, key, expr: FilterExpr) -> None:
        if key in self._filters:
            raise FilterIndexError("duplicate-registration", repr(key))
        self._filters[key] = expr
        types = filter_event_types(expr)
        if types is None:
            self._any.add(key)
        else:
            for t in types:
                self._typed.setdefault(t, set()).add(key)

    def unregister(self, key) -> None:
        if key not in self._filters:
            raise FilterIndexError("unknown-port", repr(key))
        del self._filters[key]
        self._any.discard(key)
        for bucket in self._typed.values():
            bucket.discard(key)

    def __contains__(self, key) -> bool:
        return key in self._filters

    def __len__(self) -> int:
        return len(self._filters)

    def candidates(self, ev) -> set:
        return self._typed.get(ev.kind, set()) | self._any

    def match(self, ev) -> set:
        """Keys of all registered filters the event satisfies."""
        return {k for k in self.candidates(ev) if eval_filter(self._filters[k], ev)}

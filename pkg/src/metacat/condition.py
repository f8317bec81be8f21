"""Entry selection conditions.

Grammar (keywords are case-insensitive)::

    expr   := andx ("or" andx)*
    andx   := notx ("and" notx)*
    notx   := "not" notx | "(" expr ")" | term
    term   := NAME op literal
    op     := "=" | "!=" | "<" | "<=" | ">" | ">=" | "like"
    literal:= number | 'single-quoted string'   ('' escapes a quote)

The empty condition selects everything.  A NULL or missing attribute fails
every term; ``not`` is applied to that result afterwards.
"""

from __future__ import annotations

import functools
import operator
import re
from dataclasses import dataclass
from typing import Any, Mapping, Union

from .errors import BadCondition

_NUM_RE = re.compile(r"[+-]?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?")
_NAME_RE = re.compile(r"[A-Za-z0-9_.-]+")
_OPS = ("<=", ">=", "!=", "=", "<", ">")
_KEYWORDS = {"and", "or", "not", "like"}

_COMPARE = {
    "=": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}


@dataclass(frozen=True)
class Term:
    attr: str
    op: str
    value: Union[int, float, str]


@dataclass(frozen=True)
class And:
    items: tuple


@dataclass(frozen=True)
class Or:
    items: tuple


@dataclass(frozen=True)
class Not:
    item: Any


@dataclass(frozen=True)
class Always:
    pass


Condition = Union[Term, And, Or, Not, Always]
TRUE = Always()


def _tokenize(text: str) -> list[tuple[str, Any]]:
    toks: list[tuple[str, Any]] = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
        elif c in "()":
            toks.append((c, c))
            i += 1
        elif c == "'":
            j, buf = i + 1, []
            while True:
                if j >= n:
                    raise BadCondition("unterminated string literal")
                if text[j] == "'":
                    if j + 1 < n and text[j + 1] == "'":
                        buf.append("'")
                        j += 2
                        continue
                    break
                buf.append(text[j])
                j += 1
            toks.append(("str", "".join(buf)))
            i = j + 1
        elif c in "<>=!":
            for op in _OPS:
                if text.startswith(op, i):
                    toks.append(("op", op))
                    i += len(op)
                    break
            else:
                raise BadCondition(f"unexpected {c!r}")
        else:
            m = _NUM_RE.match(text, i)
            name = _NAME_RE.match(text, i)
            if m and (not name or name.end() == m.end()):
                lit = m.group(0)
                is_float = "." in lit or "e" in lit.lower()
                toks.append(("num", float(lit) if is_float else int(lit)))
                i = m.end()
            elif name:
                word = name.group(0)
                low = word.lower()
                if low == "like":
                    toks.append(("op", "like"))
                elif low in _KEYWORDS:
                    toks.append((low, low))
                else:
                    toks.append(("name", word))
                i = name.end()
            else:
                raise BadCondition(f"unexpected {c!r}")
    return toks


class _Parser:
    def __init__(self, toks):
        self.toks = toks
        self.pos = 0

    def peek(self):
        return self.toks[self.pos][0] if self.pos < len(self.toks) else None

    def take(self, kind=None):
        if self.pos >= len(self.toks):
            raise BadCondition("unexpected end of condition")
        tok = self.toks[self.pos]
        if kind is not None and tok[0] != kind:
            raise BadCondition(f"expected {kind}, got {tok[1]!r}")
        self.pos += 1
        return tok

    def expr(self):
        items = [self.andx()]
        while self.peek() == "or":
            self.take()
            items.append(self.andx())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def andx(self):
        items = [self.notx()]
        while self.peek() == "and":
            self.take()
            items.append(self.notx())
        return items[0] if len(items) == 1 else And(tuple(items))

    def notx(self):
        kind = self.peek()
        if kind == "not":
            self.take()
            return Not(self.notx())
        if kind == "(":
            self.take()
            inner = self.expr()
            self.take(")")
            return inner
        attr = self.take("name")[1]
        op = self.take("op")[1]
        kind, value = self.take()
        if kind not in ("num", "str"):
            raise BadCondition(f"expected literal, got {value!r}")
        if op == "like" and kind != "str":
            raise BadCondition("like needs a string pattern")
        return Term(attr, op, value)


@functools.lru_cache(maxsize=1024)
def parse(text: str | None) -> Condition:
    if text is None or not text.strip():
        return TRUE
    p = _Parser(_tokenize(text))
    cond = p.expr()
    if p.pos != len(p.toks):
        raise BadCondition(f"trailing input at {p.toks[p.pos][1]!r}")
    return cond


@functools.lru_cache(maxsize=256)
def _like_regex(pattern: str) -> re.Pattern:
    return re.compile(".*".join(re.escape(part) for part in pattern.split("%")), re.S)


def _term(t: Term, values: Mapping[str, Any]) -> bool:
    v = values.get(t.attr)
    if v is None:
        return False
    if t.op == "like":
        return isinstance(v, str) and _like_regex(t.value).fullmatch(v) is not None
    if isinstance(v, str) != isinstance(t.value, str):
        return False
    return _COMPARE[t.op](v, t.value)


def evaluate(cond: Condition, values: Mapping[str, Any]) -> bool:
    """Evaluate against a name -> value mapping; type mismatches are false."""
    if isinstance(cond, Term):
        return _term(cond, values)
    if isinstance(cond, And):
        return all(evaluate(c, values) for c in cond.items)
    if isinstance(cond, Or):
        return any(evaluate(c, values) for c in cond.items)
    if isinstance(cond, Not):
        return not evaluate(cond.item, values)
    return True


def attributes(cond: Condition) -> set[str]:
    if isinstance(cond, Term):
        return {cond.attr}
    if isinstance(cond, (And, Or)):
        return set().union(*(attributes(c) for c in cond.items))
    if isinstance(cond, Not):
        return attributes(cond.item)
    return set()


def check(cond: Condition, schema: Mapping[str, str]) -> None:
    """Raise BadCondition unless every term is well-typed against ``schema``."""
    if isinstance(cond, Term):
        if cond.attr not in schema:
            raise BadCondition(f"unknown attribute {cond.attr}")
        is_string = schema[cond.attr] == "STRING"
        if cond.op == "like" and not is_string:
            raise BadCondition(f"like on non-string attribute {cond.attr}")
        if is_string != isinstance(cond.value, str):
            raise BadCondition(f"literal {cond.value!r} does not fit {cond.attr}")
    elif isinstance(cond, (And, Or)):
        for c in cond.items:
            check(c, schema)
    elif isinstance(cond, Not):
        check(cond.item, schema)

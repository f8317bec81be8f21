"""Reference models used as test oracles.

Nothing here imports the package's catalog, condition or master code: the
models are written from the data-model rules directly, with plain dicts,
so agreement with the implementation means something.
"""

from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, field
from typing import Any, Optional

NAME = re.compile(r"[A-Za-z0-9_.-]+\Z")
TYPES = ("INT", "FLOAT", "STRING", "TIMESTAMP")
SCHEMA_VERBS = {"CREATEDIR", "REMOVEDIR", "ADDATTR", "REMOVEATTR"}


# -- conditions -----------------------------------------------------------------------
# AST: ("term", attr, op, literal) | ("and", [..]) | ("or", [..]) | ("not", x)

def render(cond) -> str:
    kind = cond[0]
    if kind == "term":
        _, attr, op, lit = cond
        text = "'" + lit.replace("'", "''") + "'" if isinstance(lit, str) else repr(lit)
        return f"{attr} {op} {text}"
    if kind == "not":
        return f"NOT ({render(cond[1])})"
    joiner = " AND " if kind == "and" else " OR "
    return "(" + joiner.join(render(c) for c in cond[1]) + ")"


def _like(pattern: str, value: str) -> bool:
    # walk the pattern by hand instead of building a regex
    parts = pattern.split("%")
    if len(parts) == 1:
        return value == pattern
    if not value.startswith(parts[0]):
        return False
    pos = len(parts[0])
    for mid in parts[1:-1]:
        i = value.find(mid, pos)
        if i < 0:
            return False
        pos = i + len(mid)
    return len(value) - pos >= len(parts[-1]) and value.endswith(parts[-1])


def ref_eval(cond, values: dict) -> bool:
    if cond is None:
        return True
    kind = cond[0]
    if kind == "term":
        _, attr, op, lit = cond
        v = values.get(attr)
        if v is None:
            return False
        if op == "like":
            return isinstance(v, str) and _like(lit, v)
        if isinstance(v, str) != isinstance(lit, str):
            return False
        return {"=": v == lit, "!=": v != lit, "<": v < lit, "<=": v <= lit,
                ">": v > lit, ">=": v >= lit}[op]
    if kind == "and":
        return all(ref_eval(c, values) for c in cond[1])
    if kind == "or":
        return any(ref_eval(c, values) for c in cond[1])
    return not ref_eval(cond[1], values)


_COND_TOKEN = re.compile(r"\s*(?:(\()|(\))|('(?:[^']|'')*')|(<=|>=|!=|=|<|>)|([^\s()'<>=!]+))")


def parse_cond(text: Optional[str]):
    """Condition text to the AST above.  Precedence: NOT > AND > OR."""
    if text is None:
        return None
    toks, pos = [], 0
    while pos < len(text.rstrip()):
        m = _COND_TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ValueError(f"bad condition {text!r}")
        pos = m.end()
        lp, rp, s, op, word = m.groups()
        toks.append(("str", s[1:-1].replace("''", "'")) if s else ("sym", lp or rp or op or word))
    i = [0]

    def peek():
        return toks[i[0]] if i[0] < len(toks) else (None, None)

    def take():
        i[0] += 1
        return toks[i[0] - 1]

    def kw(word):
        k, v = peek()
        return k == "sym" and v.upper() == word

    def disj():
        parts = [conj()]
        while kw("OR"):
            take()
            parts.append(conj())
        return parts[0] if len(parts) == 1 else ("or", parts)

    def conj():
        parts = [neg()]
        while kw("AND"):
            take()
            parts.append(neg())
        return parts[0] if len(parts) == 1 else ("and", parts)

    def neg():
        if kw("NOT"):
            take()
            return ("not", neg())
        if peek() == ("sym", "("):
            take()
            inner = disj()
            assert take() == ("sym", ")")
            return inner
        attr = take()[1]
        op = take()[1]
        op = op.lower() if op.upper() == "LIKE" else op
        kind, lit = take()
        if kind == "sym":
            lit = float(lit) if re.search(r"[.eE]", lit) else int(lit)
        return ("term", attr, op, lit)

    out = disj()
    if i[0] != len(toks):
        raise ValueError(f"trailing tokens in {text!r}")
    return out


def random_cond(rng: random.Random, attrs: dict, depth: int = 2):
    """A random well-typed condition over ``attrs`` (name -> type)."""
    if depth == 0 or rng.random() < 0.4:
        name = rng.choice(sorted(attrs))
        t = attrs[name]
        if t == "STRING":
            if rng.random() < 0.4:
                return ("term", name, "like", rng.choice(["a%", "%a", "%", "b%t", "x", "%e%"]))
            return ("term", name, rng.choice(["=", "!="]), rng.choice(["alpha", "beta", "x", ""]))
        lit = rng.randrange(-2, 12) if t != "FLOAT" else round(rng.uniform(-1, 11), 2)
        return ("term", name, rng.choice(["=", "!=", "<", "<=", ">", ">="]), lit)
    kind = rng.choice(["and", "or", "not"])
    if kind == "not":
        return ("not", random_cond(rng, attrs, depth - 1))
    return (kind, [random_cond(rng, attrs, depth - 1) for _ in range(rng.randint(2, 3))])


# -- catalog ------------------------------------------------------------------------------
def _norm(path: str) -> Optional[str]:
    if not isinstance(path, str) or not path.startswith("/"):
        return None
    segs = [s for s in path.split("/") if s]
    if any(not NAME.match(s) or s in (".", "..") for s in segs):
        return None
    return "/" + "/".join(segs)


def _parent(path: str) -> str:
    return path.rsplit("/", 1)[0] or "/"


def _join(d: str, n: str) -> str:
    return d + n if d == "/" else f"{d}/{n}"


def _value(tok, t):
    if tok is None:
        return None
    if t in ("INT", "TIMESTAMP"):
        return int(tok) if re.fullmatch(r"[+-]?[0-9]+", tok) else ValueError
    if t == "FLOAT":
        if not re.fullmatch(r"[+-]?([0-9]+\.?[0-9]*|\.[0-9]+)([eE][+-]?[0-9]+)?", tok):
            return ValueError
        v = float(tok)
        return v if math.isfinite(v) else ValueError
    return tok


@dataclass
class Applied:
    ok: bool
    code: int = 0
    rows: list = field(default_factory=list)
    dir: Optional[str] = None
    effects: list = field(default_factory=list)   # (name, pre dict|None, post dict|None)


class RefCatalog:
    """Dict-backed model of the catalog's command semantics."""

    def __init__(self):
        self.dirs: dict[str, list[tuple[str, str]]] = {"/": []}
        self.entries: dict[tuple[str, str], list] = {}

    def _img(self, d, vals):
        return {a: v for (a, _), v in zip(self.dirs[d], vals)}

    def apply(self, verb: str, args: list) -> Applied:
        try:
            return getattr(self, "_" + verb.lower())(args)
        except _Err as e:
            return Applied(False, e.code)

    def _createdir(self, args):
        path = _norm(args[0])
        if path is None:
            raise _Err(402)
        attrs = []
        for tok in args[1:]:
            name, sep, t = (tok or "").partition(":")
            if not sep:
                raise _Err(400)
            if not NAME.match(name) or name in (".", ".."):
                raise _Err(402)
            if t.upper() not in TYPES:
                raise _Err(407)
            attrs.append((name, t.upper()))
        if len({a for a, _ in attrs}) != len(attrs):
            raise _Err(411)
        if path == "/":
            raise _Err(409)
        parent, name = _parent(path), path.rsplit("/", 1)[1]
        if parent not in self.dirs:
            raise _Err(405)
        if path in self.dirs or (parent, name) in self.entries:
            raise _Err(409)
        self.dirs[path] = attrs
        return Applied(True, dir=path)

    def _removedir(self, args):
        path = _norm(args[0])
        if path is None:
            raise _Err(402)
        if path == "/":
            raise _Err(413)
        if path not in self.dirs:
            raise _Err(404)
        if any(_parent(d) == path for d in self.dirs if d != "/") or \
                any(d == path for d, _ in self.entries):
            raise _Err(412)
        del self.dirs[path]
        return Applied(True, dir=path)

    def _addattr(self, args):
        path, name, t = _norm(args[0]), args[1], (args[2] or "").upper()
        if path is None or not NAME.match(name or "") or name in (".", ".."):
            raise _Err(402)
        if t not in TYPES:
            raise _Err(407)
        if path not in self.dirs:
            raise _Err(404)
        if any(a == name for a, _ in self.dirs[path]):
            raise _Err(411)
        fx = []
        for (d, n), vals in sorted(self.entries.items()):
            if d == path:
                pre = self._img(d, vals)
                fx.append((n, pre, {**pre, name: None}))
                vals.append(None)
        self.dirs[path].append((name, t))
        return Applied(True, dir=path, effects=fx)

    def _removeattr(self, args):
        path, name = _norm(args[0]), args[1]
        if path is None:
            raise _Err(402)
        if path not in self.dirs:
            raise _Err(404)
        names = [a for a, _ in self.dirs[path]]
        if name not in names:
            raise _Err(408)
        i = names.index(name)
        fx = []
        for (d, n), vals in sorted(self.entries.items()):
            if d == path:
                pre = self._img(d, vals)
                post = dict(pre)
                del post[name]
                fx.append((n, pre, post))
                del vals[i]
        del self.dirs[path][i]
        return Applied(True, dir=path, effects=fx)

    def _entry(self, path):
        p = _norm(path)
        if p is None or p == "/":
            raise _Err(402)
        return _parent(p), p.rsplit("/", 1)[1]

    def _addentry(self, args):
        d, n = self._entry(args[0])
        if d not in self.dirs:
            raise _Err(404)
        attrs = self.dirs[d]
        if len(args) - 1 != len(attrs):
            raise _Err(406)
        vals = [_value(tok, t) for tok, (_, t) in zip(args[1:], attrs)]
        if ValueError in vals:
            raise _Err(407)
        if (d, n) in self.entries or _join(d, n) in self.dirs:
            raise _Err(409)
        self.entries[(d, n)] = vals
        return Applied(True, dir=d, effects=[(n, None, self._img(d, vals))])

    def _setattr(self, args):
        d, n = self._entry(args[0])
        pairs = args[1:]
        if len(pairs) % 2:
            raise _Err(400)
        if d not in self.dirs:
            raise _Err(404)
        types = dict(self.dirs[d])
        new = {}
        for a, tok in zip(pairs[::2], pairs[1::2]):
            if a not in types:
                raise _Err(408)
            v = _value(tok, types[a])
            if v is ValueError:
                raise _Err(407)
            new[a] = v
        if (d, n) not in self.entries:
            raise _Err(404)
        vals = self.entries[(d, n)]
        pre = self._img(d, vals)
        for i, (a, _) in enumerate(self.dirs[d]):
            if a in new:
                vals[i] = new[a]
        return Applied(True, dir=d, effects=[(n, pre, self._img(d, vals))])

    def _delentry(self, args):
        d, n = self._entry(args[0])
        if (d, n) not in self.entries:
            raise _Err(404)
        pre = self._img(d, self.entries.pop((d, n)))
        return Applied(True, dir=d, effects=[(n, pre, None)])

    def _getattr(self, args):
        d, n = self._entry(args[0])
        if (d, n) not in self.entries:
            raise _Err(404)
        return Applied(True, rows=list(self._img(d, self.entries[(d, n)]).items()))

    def _find(self, args):
        d = _norm(args[0])
        if d not in self.dirs:
            raise _Err(404)
        return Applied(True, rows=sorted(n for (dd, n) in self.entries if dd == d))

    # -- views ------------------------------------------------------------------------
    def subtree(self, root: str, cond=None) -> tuple[dict, dict]:
        """(dirs, entries) under ``root``; entries narrowed by ``cond``."""
        under = lambda p: root == "/" or p == root or p.startswith(root + "/")  # noqa: E731
        dirs = {p: list(a) for p, a in self.dirs.items() if under(p)}
        ents = {k: list(v) for k, v in self.entries.items()
                if under(k[0]) and ref_eval(cond, self._img(k[0], v))}
        return dirs, ents


class _Err(Exception):
    def __init__(self, code):
        self.code = code


def random_command(rng: random.Random, ref: RefCatalog, dirs=("/a", "/a/b", "/c", "/c/d")) -> tuple[str, list]:
    """A random, usually valid, mutating command against the reference state."""
    existing = sorted(ref.dirs)
    entries = sorted(ref.entries)
    roll = rng.random()
    if roll < 0.10:
        d = rng.choice(dirs)
        return "CREATEDIR", [d, "n:INT", "s:STRING"] if rng.random() < 0.8 else [d]
    if roll < 0.13 and len(existing) > 1:
        return "REMOVEDIR", [rng.choice(existing[1:])]
    if roll < 0.17:
        d = rng.choice(existing)
        return "ADDATTR", [d, rng.choice(["x", "n", "s"]), rng.choice(["INT", "FLOAT", "STRING"])]
    if roll < 0.20:
        d = rng.choice(existing)
        return "REMOVEATTR", [d, rng.choice(["x", "n", "s"])]
    if roll < 0.35 and entries:
        d, n = rng.choice(entries)
        return "DELENTRY", [_join(d, n)]
    if roll < 0.60 and entries:
        d, n = rng.choice(entries)
        args = [_join(d, n)]
        for a, t in ref.dirs[d][: rng.randint(1, 2)]:
            args += [a, random_token(rng, t)]
        return "SETATTR", args if len(args) > 1 else [_join(d, n), "n", "1"]
    d = rng.choice(existing)
    name = f"e{rng.randrange(40)}"
    return "ADDENTRY", [_join(d, name), *(random_token(rng, t) for _, t in ref.dirs[d])]


def random_token(rng: random.Random, t: str) -> Optional[str]:
    if rng.random() < 0.1:
        return None
    if t in ("INT", "TIMESTAMP"):
        return str(rng.randrange(-1, 11))
    if t == "FLOAT":
        return repr(round(rng.uniform(-1, 11), 2))
    return rng.choice(["alpha", "beta", "bat", "x", "", "tea", "a b"])


def dump_model(dirs: dict, entries: dict, root: str) -> list[str]:
    """The canonical dump text for a model subtree, built without the package."""
    from metacat.wire import encode_tokens

    def fmt(v):
        return None if v is None else repr(v) if isinstance(v, float) else str(v)

    out = []
    if root == "/":
        out += [encode_tokens(["ADDATTR", "/", a, t]) for a, t in dirs["/"]]

    def walk(path):
        if path != "/":
            out.append(encode_tokens(["CREATEDIR", path, *(f"{a}:{t}" for a, t in dirs[path])]))
        for (d, n) in sorted(k for k in entries if k[0] == path):
            out.append(encode_tokens(["ADDENTRY", _join(d, n), *(fmt(v) for v in entries[(d, n)])]))
        kids = sorted(p for p in dirs if p != "/" and _parent(p) == path)
        for k in kids:
            walk(k)

    walk(root)
    return out

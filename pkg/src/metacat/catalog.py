"""Hierarchical metadata catalog.

Directories double as schemas: each one holds an ordered list of typed
attribute definitions, the entries described by them, and child
directories.  State lives in the ``meta`` table of a :class:`~.storage.Store`:

* ``("d", parent, name)`` -> ``{"attrs": [[name, type], ...]}`` (the root is
  ``("d", "", "")`` and may be absent, meaning an empty schema)
* ``("e", dir, name)`` -> list of values aligned with the directory's attrs

Every mutation runs inside a store transaction and notifies
``Catalog.listeners`` from within that same transaction, which is how the
replication log ends up committed atomically with the change it describes.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Any, Callable, Iterator, NamedTuple, Optional, Sequence

from . import condition as cond_mod
from . import paths
from .errors import (
    AlreadyExists,
    ArityMismatch,
    BadName,
    CannotRemoveRoot,
    DuplicateAttribute,
    MalformedLine,
    NoSuchAttribute,
    NotEmpty,
    NotFound,
    ParentNotFound,
    TypeMismatch,
    UnknownVerb,
)
from .storage import Store, StoreTxn
from .wire import MUTATING_VERBS, Request, encode_tokens, parse_request

META = "meta"
TYPES = ("INT", "FLOAT", "STRING", "TIMESTAMP")
_INT_RE = re.compile(r"[+-]?[0-9]+\Z")
_FLOAT_RE = re.compile(r"[+-]?([0-9]+\.?[0-9]*|\.[0-9]+)([eE][+-]?[0-9]+)?\Z")


class AttributeDef(NamedTuple):
    name: str
    type: str


@dataclass(frozen=True)
class Effect:
    """Before/after image of one entry touched by a command.

    Images are ``[[attr, value], ...]`` in schema order, or None when the
    entry did not exist on that side of the change.
    """

    name: str
    pre: Optional[list]
    post: Optional[list]


@dataclass(frozen=True)
class Change:
    dir: str
    request: Request
    effects: tuple = ()


# -- values ------------------------------------------------------------------

def check_type(type_name: str) -> str:
    t = str(type_name).upper()
    if t not in TYPES:
        raise TypeMismatch(f"unknown type {type_name}")
    return t


def coerce(value: Any, type_name: str) -> Any:
    """Validate a Python value against an attribute type."""
    if value is None:
        return None
    if isinstance(value, bool):
        raise TypeMismatch(f"{value!r} is not {type_name}")
    if type_name in ("INT", "TIMESTAMP"):
        if isinstance(value, int):
            return value
    elif type_name == "FLOAT":
        if isinstance(value, (int, float)) and math.isfinite(value):
            return float(value)
    elif type_name == "STRING":
        if isinstance(value, str):
            return value
    raise TypeMismatch(f"{value!r} is not {type_name}")


def parse_value(token: Optional[str], type_name: str) -> Any:
    """Interpret a wire token as a value of ``type_name``."""
    if token is None:
        return None
    if type_name in ("INT", "TIMESTAMP"):
        if _INT_RE.match(token):
            return int(token)
    elif type_name == "FLOAT":
        v = float(token) if _FLOAT_RE.match(token) else math.nan
        if math.isfinite(v):
            return v
    elif type_name == "STRING":
        return token
    raise TypeMismatch(f"{token!r} is not {type_name}")


def format_value(value: Any) -> Optional[str]:
    if value is None:
        return None
    if isinstance(value, float):
        return repr(value)
    return str(value)


def image(attrs: Sequence, values: Sequence) -> list:
    return [[a[0], v] for a, v in zip(attrs, values)]


# -- row keys ----------------------------------------------------------------

def _dkey(path: str) -> tuple:
    if path == paths.ROOT:
        return ("d", "", "")
    return ("d", paths.parent(path), paths.basename(path))


def _ekey(dir_path: str, name: str) -> tuple:
    return ("e", dir_path, name)


def _dir_row(reader, path: str) -> Optional[dict]:
    row = reader.get(META, _dkey(path))
    if row is None and path == paths.ROOT:
        return {"attrs": []}
    return row


def _require_dir(reader, path: str) -> dict:
    row = _dir_row(reader, path)
    if row is None:
        raise NotFound(path)
    return row


def _child_dirs(reader, path: str) -> list[str]:
    return [k[2] for k in reader.keys(META, ("d", path))]


def _entry_names(reader, path: str) -> list[str]:
    return [k[2] for k in reader.keys(META, ("e", path))]


def _attr_defs(row: dict) -> list[AttributeDef]:
    return [AttributeDef(n, t) for n, t in row["attrs"]]


def _attr_tokens(attrs: Sequence) -> list[str]:
    return [f"{a[0]}:{a[1]}" for a in attrs]


def parse_attr_token(token: str) -> AttributeDef:
    name, sep, typ = (token or "").partition(":")
    if not sep:
        raise MalformedLine(f"attribute must be name:TYPE, got {token!r}")
    return AttributeDef(paths.check_name(name), check_type(typ))


class Catalog:
    """Catalog operations over a store.

    Mutating methods take an optional ``txn`` to join a caller's transaction;
    read methods take an optional ``at`` (a transaction or snapshot view) and
    otherwise read the latest committed state.
    """

    def __init__(self, store: Optional[Store] = None):
        self.store = store if store is not None else Store()
        self.listeners: list[Callable[[StoreTxn, Change], None]] = []

    # -- plumbing -----------------------------------------------------------
    def _mutate(self, work, txn):
        if txn is not None:
            return work(txn)
        return self.store.with_transaction(work)

    def _read(self, work, at):
        if at is not None:
            return work(at)
        with self.store.open_snapshot_view() as view:
            return work(view)

    def _notify(self, txn, dir_path, verb, args, effects=()):
        if self.listeners:
            change = Change(dir_path, Request(verb, tuple(args)), tuple(effects))
            for fn in self.listeners:
                fn(txn, change)

    # -- directories ----------------------------------------------------------
    def create_directory(self, path: str, attrs: Sequence = (), *, txn=None) -> None:
        path = paths.normalize(path)
        defs = [AttributeDef(paths.check_name(n), check_type(t)) for n, t in attrs]
        names = [d.name for d in defs]
        dup = next((n for i, n in enumerate(names) if n in names[:i]), None)
        if dup is not None:
            raise DuplicateAttribute(dup)

        def work(t):
            if path == paths.ROOT:
                raise AlreadyExists(path)
            parent = paths.parent(path)
            if _dir_row(t, parent) is None:
                raise ParentNotFound(parent)
            name = paths.basename(path)
            if t.get(META, _dkey(path)) is not None or t.get(META, _ekey(parent, name)) is not None:
                raise AlreadyExists(path)
            t.put(META, _dkey(path), {"attrs": [list(d) for d in defs]})
            self._notify(t, path, "CREATEDIR", [path, *_attr_tokens(defs)])

        self._mutate(work, txn)

    def remove_directory(self, path: str, *, txn=None) -> None:
        path = paths.normalize(path)

        def work(t):
            if path == paths.ROOT:
                raise CannotRemoveRoot()
            _require_dir(t, path)
            if _entry_names(t, path) or _child_dirs(t, path):
                raise NotEmpty(path)
            t.delete(META, _dkey(path))
            self._notify(t, path, "REMOVEDIR", [path])

        self._mutate(work, txn)

    def define_attribute(self, dir_path: str, attr: Sequence, *, txn=None) -> None:
        dir_path = paths.normalize(dir_path)
        new = AttributeDef(paths.check_name(attr[0]), check_type(attr[1]))

        def work(t):
            row = _require_dir(t, dir_path)
            if any(a[0] == new.name for a in row["attrs"]):
                raise DuplicateAttribute(new.name)
            t.put(META, _dkey(dir_path), {"attrs": row["attrs"] + [list(new)]})
            for name in _entry_names(t, dir_path):
                t.put(META, _ekey(dir_path, name), t.get(META, _ekey(dir_path, name)) + [None])
            self._notify(t, dir_path, "ADDATTR", [dir_path, new.name, new.type])

        self._mutate(work, txn)

    def undefine_attribute(self, dir_path: str, name: str, *, txn=None) -> None:
        dir_path = paths.normalize(dir_path)

        def work(t):
            row = _require_dir(t, dir_path)
            idx = next((i for i, a in enumerate(row["attrs"]) if a[0] == name), None)
            if idx is None:
                raise NoSuchAttribute(name)
            attrs = row["attrs"]
            new_attrs = attrs[:idx] + attrs[idx + 1:]
            t.put(META, _dkey(dir_path), {"attrs": new_attrs})
            effects = []
            for entry in _entry_names(t, dir_path):
                old = t.get(META, _ekey(dir_path, entry))
                new = old[:idx] + old[idx + 1:]
                t.put(META, _ekey(dir_path, entry), new)
                effects.append(Effect(entry, image(attrs, old), image(new_attrs, new)))
            self._notify(t, dir_path, "REMOVEATTR", [dir_path, name], effects)

        self._mutate(work, txn)

    # -- entries --------------------------------------------------------------
    def insert_entry(self, dir_path: str, name: str, values: Sequence, *, txn=None) -> None:
        dir_path = paths.normalize(dir_path)
        paths.check_name(name)

        def work(t):
            attrs = _require_dir(t, dir_path)["attrs"]
            if t.get(META, _ekey(dir_path, name)) is not None or \
                    t.get(META, _dkey(paths.join(dir_path, name))) is not None:
                raise AlreadyExists(paths.join(dir_path, name))
            if len(values) != len(attrs):
                raise ArityMismatch(f"{len(values)} values for {len(attrs)} attributes")
            row = [coerce(v, a[1]) for v, a in zip(values, attrs)]
            t.put(META, _ekey(dir_path, name), row)
            self._notify(
                t, dir_path, "ADDENTRY",
                [paths.join(dir_path, name), *(format_value(v) for v in row)],
                [Effect(name, None, image(attrs, row))],
            )

        self._mutate(work, txn)

    def update_entry(self, dir_path: str, name: str, assignments, *, txn=None) -> None:
        dir_path = paths.normalize(dir_path)
        if isinstance(assignments, dict):
            assignments = list(assignments.items())

        def work(t):
            attrs = _require_dir(t, dir_path)["attrs"]
            old = t.get(META, _ekey(dir_path, name))
            if old is None:
                raise NotFound(paths.join(dir_path, name))
            index = {a[0]: i for i, a in enumerate(attrs)}
            new = list(old)
            args = [paths.join(dir_path, name)]
            for attr, value in assignments:
                if attr not in index:
                    raise NoSuchAttribute(attr)
                i = index[attr]
                new[i] = coerce(value, attrs[i][1])
                args += [attr, format_value(new[i])]
            t.put(META, _ekey(dir_path, name), new)
            self._notify(t, dir_path, "SETATTR", args,
                         [Effect(name, image(attrs, old), image(attrs, new))])

        self._mutate(work, txn)

    def delete_entry(self, dir_path: str, name: str, *, txn=None) -> None:
        dir_path = paths.normalize(dir_path)

        def work(t):
            attrs = _require_dir(t, dir_path)["attrs"]
            old = t.get(META, _ekey(dir_path, name))
            if old is None:
                raise NotFound(paths.join(dir_path, name))
            t.delete(META, _ekey(dir_path, name))
            self._notify(t, dir_path, "DELENTRY", [paths.join(dir_path, name)],
                         [Effect(name, image(attrs, old), None)])

        self._mutate(work, txn)

    # -- reads ------------------------------------------------------------------
    def exists(self, path: str, *, at=None) -> bool:
        path = paths.normalize(path)
        return self._read(lambda r: _dir_row(r, path) is not None, at)

    def schema(self, dir_path: str, *, at=None) -> list[AttributeDef]:
        dir_path = paths.normalize(dir_path)
        return self._read(lambda r: _attr_defs(_require_dir(r, dir_path)), at)

    def list_directory(self, dir_path: str, *, at=None) -> tuple[list[str], list[str]]:
        """(child directory names, entry names), both sorted."""
        dir_path = paths.normalize(dir_path)

        def work(r):
            _require_dir(r, dir_path)
            return _child_dirs(r, dir_path), _entry_names(r, dir_path)

        return self._read(work, at)

    def read_entry(self, dir_path: str, name: str, *, at=None) -> list[tuple[str, Any]]:
        dir_path = paths.normalize(dir_path)

        def work(r):
            attrs = _require_dir(r, dir_path)["attrs"]
            values = r.get(META, _ekey(dir_path, name))
            if values is None:
                raise NotFound(paths.join(dir_path, name))
            return [(a[0], v) for a, v in zip(attrs, values)]

        return self._read(work, at)

    def find_entries(self, dir_path: str, cond="", *, at=None) -> list[str]:
        dir_path = paths.normalize(dir_path)
        parsed = cond if not isinstance(cond, (str, type(None))) else cond_mod.parse(cond)

        def work(r):
            attrs = _require_dir(r, dir_path)["attrs"]
            cond_mod.check(parsed, {a[0]: a[1] for a in attrs})
            names = [a[0] for a in attrs]
            out = []
            for key, values in r.items(META, ("e", dir_path)):
                if cond_mod.evaluate(parsed, dict(zip(names, values))):
                    out.append(key[2])
            return out

        return self._read(work, at)

    def iter_dump(self, root: str, cond=None, *, at) -> Iterator[str]:
        """Yield the commands rebuilding the subtree at ``root`` from ``at``.

        Parents come before children and a directory before its entries.
        With ``cond``, only entries satisfying it are emitted; directories
        are always emitted.
        """
        root = paths.normalize(root)
        parsed = cond_mod.parse(cond) if isinstance(cond, (str, type(None))) else cond
        row = _require_dir(at, root)
        if root == paths.ROOT:
            for a in row["attrs"]:
                yield encode_tokens(["ADDATTR", root, a[0], a[1]])
        stack = [(root, row)]
        while stack:
            path, row = stack.pop()
            if path != paths.ROOT:
                yield encode_tokens(["CREATEDIR", path, *_attr_tokens(row["attrs"])])
            names = [a[0] for a in row["attrs"]]
            for key, values in at.items(META, ("e", path)):
                if parsed is cond_mod.TRUE or cond_mod.evaluate(parsed, dict(zip(names, values))):
                    yield encode_tokens(
                        ["ADDENTRY", paths.join(path, key[2]), *(format_value(v) for v in values)]
                    )
            children = [(paths.join(path, k[2]), crow) for k, crow in at.items(META, ("d", path))]
            stack.extend(reversed(children))

    def dump_subtree(self, root: str, cond=None, *, at=None) -> list[str]:
        return self._read(lambda r: list(self.iter_dump(root, cond, at=r)), at)

    def restore(self, commands, *, txn=None, ensure_parents: bool = True) -> int:
        """Replay dump commands (strings or Requests); returns how many ran."""

        def work(t):
            n = 0
            for cmd in commands:
                req = cmd if isinstance(cmd, Request) else parse_request(cmd)
                if n == 0 and ensure_parents and req.verb == "CREATEDIR":
                    self.ensure_directories(paths.ancestors(paths.normalize(req.args[0])), txn=t)
                self.execute(req, txn=t)
                n += 1
            return n

        return self._mutate(work, txn)

    def ensure_directories(self, dirs: Sequence[str], *, txn=None) -> None:
        """Create any missing directories in ``dirs`` (outermost first), schema-less."""

        def work(t):
            for d in dirs:
                if _dir_row(t, d) is None:
                    self.create_directory(d, txn=t)

        self._mutate(work, txn)

    def purge_subtree(self, root: str, *, txn) -> None:
        """Drop ``root`` and everything under it without notifying listeners.

        Used only by replicas discarding a subtree before re-bootstrap.
        """
        root = paths.normalize(root)
        if _dir_row(txn, root) is None:
            return
        for name in _child_dirs(txn, root):
            self.purge_subtree(paths.join(root, name), txn=txn)
        for name in _entry_names(txn, root):
            txn.delete(META, _ekey(root, name))
        txn.delete(META, _dkey(root))

    def check_invariants(self, *, at=None) -> None:
        """Assert schema alignment and namespace soundness over the whole tree."""

        def work(r):
            stack = [paths.ROOT]
            while stack:
                path = stack.pop()
                row = _dir_row(r, path)
                assert row is not None, f"missing directory {path}"
                width = len(row["attrs"])
                names = {a[0] for a in row["attrs"]}
                assert len(names) == width, f"duplicate attribute in {path}"
                entries = set(_entry_names(r, path))
                children = _child_dirs(r, path)
                assert not entries & set(children), f"name clash in {path}"
                for e in entries:
                    assert len(r.get(META, _ekey(path, e))) == width, f"misaligned {path}/{e}"
                stack.extend(paths.join(path, c) for c in children)

        self._read(work, at)

    # -- wire-level execution ---------------------------------------------------
    def execute(self, req: Request, *, txn=None, at=None) -> list[str]:
        """Run one client request and return its response rows."""
        verb, args = req.verb, req.args
        handler = _HANDLERS.get(verb)
        if handler is None:
            raise UnknownVerb(verb)
        lo, hi = _ARITY[verb]
        if len(args) < lo or (hi is not None and len(args) > hi):
            raise MalformedLine(f"wrong number of arguments for {verb}")
        if verb in MUTATING_VERBS:
            return self._mutate(lambda t: handler(self, args, t) or [], txn)
        return handler(self, args, at if at is not None else txn)


def _h_createdir(cat, args, t):
    cat.create_directory(args[0], [parse_attr_token(a) for a in args[1:]], txn=t)


def _h_removedir(cat, args, t):
    cat.remove_directory(args[0], txn=t)


def _h_addattr(cat, args, t):
    cat.define_attribute(args[0], (args[1], args[2]), txn=t)


def _h_removeattr(cat, args, t):
    cat.undefine_attribute(args[0], args[1], txn=t)


def _h_addentry(cat, args, t):
    d, name = paths.split_entry(args[0])
    attrs = cat.schema(d, at=t)
    if len(args) - 1 != len(attrs):
        raise ArityMismatch(f"{len(args) - 1} values for {len(attrs)} attributes")
    values = [parse_value(tok, a.type) for tok, a in zip(args[1:], attrs)]
    cat.insert_entry(d, name, values, txn=t)


def _h_setattr(cat, args, t):
    d, name = paths.split_entry(args[0])
    pairs = args[1:]
    if len(pairs) % 2:
        raise MalformedLine("SETATTR needs attribute/value pairs")
    types = {a.name: a.type for a in cat.schema(d, at=t)}
    assignments = []
    for attr, tok in zip(pairs[::2], pairs[1::2]):
        if attr not in types:
            raise NoSuchAttribute(attr)
        assignments.append((attr, parse_value(tok, types[attr])))
    cat.update_entry(d, name, assignments, txn=t)


def _h_delentry(cat, args, t):
    d, name = paths.split_entry(args[0])
    cat.delete_entry(d, name, txn=t)


def _h_getattr(cat, args, at):
    d, name = paths.split_entry(args[0])
    return [encode_tokens([attr, format_value(v)]) for attr, v in cat.read_entry(d, name, at=at)]


def _h_find(cat, args, at):
    return cat.find_entries(args[0], args[1] if len(args) > 1 else "", at=at)


def _h_dump(cat, args, at):
    return cat.dump_subtree(args[0], at=at)


def _h_ping(cat, args, at):
    return []


_HANDLERS = {
    "CREATEDIR": _h_createdir,
    "REMOVEDIR": _h_removedir,
    "ADDATTR": _h_addattr,
    "REMOVEATTR": _h_removeattr,
    "ADDENTRY": _h_addentry,
    "SETATTR": _h_setattr,
    "DELENTRY": _h_delentry,
    "GETATTR": _h_getattr,
    "FIND": _h_find,
    "DUMP": _h_dump,
    "PING": _h_ping,
    "QUIT": _h_ping,
}

_ARITY = {
    "CREATEDIR": (1, None),
    "REMOVEDIR": (1, 1),
    "ADDATTR": (3, 3),
    "REMOVEATTR": (2, 2),
    "ADDENTRY": (1, None),
    "SETATTR": (3, None),
    "DELENTRY": (1, 1),
    "GETATTR": (1, 1),
    "FIND": (1, 2),
    "DUMP": (1, 1),
    "PING": (0, 0),
    "QUIT": (0, 0),
}


def target_path(req: Request) -> Optional[str]:
    """The directory a client request operates on, or None for PING/QUIT."""
    if not req.args or req.args[0] is None:
        return None
    try:
        if req.verb in ("ADDENTRY", "SETATTR", "DELENTRY", "GETATTR"):
            return paths.split_entry(req.args[0])[0]
        if req.verb in _HANDLERS:
            return paths.normalize(req.args[0])
    except BadName:
        return None
    return None

"""Federation of catalogs by subtree mastership.

A mastership map assigns non-overlapping subtree roots to owning nodes.
Non-owners see a root either as a PHYSICAL replica (a local copy kept
current by log shipping) or as a VIRTUAL one (nothing stored locally;
commands are forwarded to the owner).

Map file format, one root per line, ``#`` starts a comment::

    /a  A  10.0.0.1:7000  PHYSICAL
    /b  B  10.0.0.2:7000  VIRTUAL
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

from . import paths
from .catalog import target_path
from .errors import ForwardLoop, MalformedLine, OverlappingRoots, Redirect, UnknownNode
from .wire import MUTATING_VERBS, Request

PHYSICAL, VIRTUAL = "PHYSICAL", "VIRTUAL"
LOCAL = "LOCAL"


@dataclass(frozen=True)
class RootAssignment:
    root: str
    owner: str
    addr: str
    mode: str = PHYSICAL


@dataclass
class MastershipMap:
    roots: list[RootAssignment] = field(default_factory=list)
    self_id: str = ""

    @classmethod
    def parse(cls, text: str, self_id: str = "") -> "MastershipMap":
        roots = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise MalformedLine(f"map line {lineno}: expected 4 fields")
            root, owner, addr, mode = parts
            mode = mode.upper()
            if mode not in (PHYSICAL, VIRTUAL):
                raise MalformedLine(f"map line {lineno}: bad mode {mode}")
            roots.append(RootAssignment(paths.normalize(root), owner, addr, mode))
        return cls(roots, self_id)

    @classmethod
    def load(cls, path: Union[str, Path], self_id: str = "") -> "MastershipMap":
        return cls.parse(Path(path).read_text(), self_id)

    def to_text(self) -> str:
        return "".join(f"{r.root} {r.owner} {r.addr} {r.mode}\n" for r in self.roots)

    def nodes(self) -> dict[str, str]:
        return {r.owner: r.addr for r in self.roots}


def _addressable(addr: str) -> bool:
    host, sep, port = addr.rpartition(":")
    return bool(sep and host and port.isdigit())


def validate_map(m: MastershipMap, known_nodes: Optional[Iterable[str]] = None) -> None:
    """Raise unless roots are pairwise non-overlapping and every owner is reachable."""
    known = set(known_nodes) if known_nodes is not None else None
    for r in m.roots:
        if known is not None and r.owner not in known:
            raise UnknownNode(r.owner)
        if not _addressable(r.addr):
            raise UnknownNode(f"{r.owner} has no usable address {r.addr!r}")
    for a, b in combinations(m.roots, 2):
        if paths.overlaps(a.root, b.root):
            raise OverlappingRoots(a.root, b.root)


def resolve_owner(m: MastershipMap, path: str) -> Union[RootAssignment, str]:
    """The assignment whose root contains ``path``, or LOCAL if there is none."""
    path = paths.normalize(path)
    for r in m.roots:
        if paths.is_under(path, r.root):
            return r
    return LOCAL


def route_command(
    m: MastershipMap,
    req: Request,
    *,
    execute_local: Callable[[Request], list[str]],
    forward: Callable[[RootAssignment, Request], list[str]],
    origin: Optional[str] = None,
) -> list[str]:
    """Execute ``req`` locally, forward it to its owner, or refuse with a redirect."""
    target = target_path(req)
    owner = resolve_owner(m, target) if target is not None else LOCAL
    if owner == LOCAL or owner.owner == m.self_id:
        return execute_local(req)
    mutating = req.verb in MUTATING_VERBS
    if owner.mode == PHYSICAL:
        if mutating:
            raise Redirect(f"{owner.owner} {owner.addr}", target)
        return execute_local(req)
    if origin is not None:
        raise ForwardLoop(f"from {origin}")
    return forward(owner, req)

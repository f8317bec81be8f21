"""Canonical catalog paths.

Paths are plain strings in canonical form: ``"/"`` for the root, otherwise
``"/" + "/".join(segments)``.  Everything that accepts a path from outside
runs it through :func:`normalize` first.
"""

from __future__ import annotations

import re

from .errors import BadName

ROOT = "/"
_NAME_RE = re.compile(r"[A-Za-z0-9_.-]+\Z")


def check_name(name: str) -> str:
    if not isinstance(name, str) or not _NAME_RE.match(name) or name in (".", ".."):
        raise BadName(repr(name))
    return name


def normalize(path: str) -> str:
    """Return the canonical form of ``path``; raises BadName if it has none."""
    if not isinstance(path, str) or not path.startswith("/"):
        raise BadName(repr(path))
    segments = [s for s in path.split("/") if s]
    for s in segments:
        check_name(s)
    return "/" + "/".join(segments)


def segments(path: str) -> list[str]:
    return [s for s in path.split("/") if s]


def parent(path: str) -> str:
    if path == ROOT:
        raise BadName("root has no parent")
    head = path.rsplit("/", 1)[0]
    return head or ROOT


def basename(path: str) -> str:
    return path.rsplit("/", 1)[1] if path != ROOT else ""


def join(path: str, name: str) -> str:
    return path + name if path == ROOT else f"{path}/{name}"


def is_under(path: str, root: str) -> bool:
    """True when ``path`` is ``root`` or one of its descendants."""
    if root == ROOT or path == root:
        return True
    return path.startswith(root + "/")


def overlaps(a: str, b: str) -> bool:
    return is_under(a, b) or is_under(b, a)


def ancestors(path: str) -> list[str]:
    """Proper ancestors of ``path`` excluding the root, outermost first."""
    out = []
    cur = ROOT
    for s in segments(path)[:-1]:
        cur = join(cur, s)
        out.append(cur)
    return out


def split_entry(path: str) -> tuple[str, str]:
    """Split an entry path into (directory, entry name)."""
    path = normalize(path)
    if path == ROOT:
        raise BadName("root is not an entry")
    return parent(path), basename(path)

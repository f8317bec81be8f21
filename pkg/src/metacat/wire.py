"""Line-oriented text protocol.

Requests are a single LF-terminated line: an uppercase verb followed by
space-separated tokens.  A token is double-quoted when it is empty or holds
whitespace, a double quote or a backslash; inside quotes ``\\"``, ``\\\\``
and ``\\n`` are the only escapes.  The bare token ``\\N`` stands for NULL.

Responses are a status line (``OK`` or ``ERR <code> <message>``), zero or
more data rows each prefixed by ``|``, and a line holding only ``.``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union, Iterable, Optional, Sequence

from .errors import ERROR_TABLE, CatalogError, MalformedLine, UnknownVerb

CLIENT_VERBS = (
    "CREATEDIR", "REMOVEDIR", "ADDATTR", "REMOVEATTR", "ADDENTRY", "SETATTR",
    "DELENTRY", "GETATTR", "FIND", "DUMP", "PING", "QUIT",
)
REPLICATION_VERBS = (
    "SUBSCRIBE", "UNSUBSCRIBE", "SNAPSHOT_BEGIN", "SNAPSHOT_END", "LOG", "ACK", "RESUME",
)
FEDERATION_VERBS = ("VIA",)
VERBS = frozenset(CLIENT_VERBS + REPLICATION_VERBS + FEDERATION_VERBS)

MUTATING_VERBS = frozenset(
    {"CREATEDIR", "REMOVEDIR", "ADDATTR", "REMOVEATTR", "ADDENTRY", "SETATTR", "DELENTRY"}
)
READ_VERBS = frozenset({"GETATTR", "FIND", "DUMP"})

NULL_TOKEN = "\\N"
TERMINATOR = "."

Arg = Optional[str]


@dataclass(frozen=True)
class Request:
    verb: str
    args: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "args", tuple(self.args))

    @property
    def line(self) -> str:
        return encode_request(self.verb, self.args)


def _needs_quotes(arg: str) -> bool:
    return arg == "" or any(c.isspace() or c in '"\\' for c in arg)


def encode_token(arg: Arg) -> str:
    if arg is None:
        return NULL_TOKEN
    if not isinstance(arg, str):
        raise TypeError(f"token must be str or None, not {type(arg).__name__}")
    if not _needs_quotes(arg):
        return arg
    body = arg.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\r", "\\r")
    return f'"{body}"'


def encode_tokens(args: Iterable[Arg]) -> str:
    return " ".join(encode_token(a) for a in args)


def tokenize(text: str) -> list[Arg]:
    """Split one line body into tokens; the inverse of :func:`encode_tokens`."""
    if "\n" in text or "\r" in text:
        raise MalformedLine("embedded line break")
    out: list[Arg] = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c == " ":
            i += 1
            continue
        if c == '"':
            buf = []
            i += 1
            while True:
                if i >= n:
                    raise MalformedLine("unterminated quote")
                c = text[i]
                if c == '"':
                    i += 1
                    break
                if c == "\\":
                    if i + 1 >= n:
                        raise MalformedLine("unterminated quote")
                    esc = text[i + 1]
                    if esc in '"\\':
                        buf.append(esc)
                    elif esc == "n":
                        buf.append("\n")
                    elif esc == "r":
                        buf.append("\r")
                    else:
                        raise MalformedLine(f"bad escape \\{esc}")
                    i += 2
                    continue
                buf.append(c)
                i += 1
            if i < n and text[i] != " ":
                raise MalformedLine("text after closing quote")
            out.append("".join(buf))
            continue
        j = text.find(" ", i)
        j = n if j < 0 else j
        tok = text[i:j]
        if tok == NULL_TOKEN:
            out.append(None)
        elif '"' in tok or "\\" in tok:
            raise MalformedLine(f"unquoted special character in {tok!r}")
        else:
            out.append(tok)
        i = j
    return out


def encode_request(verb: str, args: Sequence[Arg] = ()) -> str:
    if verb not in VERBS:
        raise UnknownVerb(verb)
    body = encode_tokens(args)
    return f"{verb} {body}\n" if body else f"{verb}\n"


def parse_request(line: str) -> Request:
    if line.endswith("\n"):
        line = line[:-1]
    toks = tokenize(line)
    if not toks or not toks[0] or line.startswith(" "):
        raise MalformedLine("empty verb")
    verb = toks[0]
    if verb not in VERBS:
        raise UnknownVerb(verb)
    return Request(verb, tuple(toks[1:]))


def encode_response(result) -> str:
    """Frame a result: an iterable of row strings, or a CatalogError."""
    if isinstance(result, CatalogError):
        msg = " ".join(result.message.split())
        return f"ERR {result.code} {msg}\n.\n"
    rows = "".join(f"|{row}\n" for row in (result or ()))
    return f"OK\n{rows}.\n"


def response_lines(result) -> list[str]:
    return encode_response(result).splitlines()


@dataclass
class Response:
    ok: bool
    rows: list[str]
    code: int = 0
    message: str = ""

    def error(self) -> CatalogError:
        cls = ERROR_TABLE.get(self.code, CatalogError)
        detail = self.message
        prefix = cls.default_message
        if detail == prefix:
            detail = ""
        elif detail.startswith(prefix + ": "):
            detail = detail[len(prefix) + 2:]
        err = cls.__new__(cls)
        Exception.__init__(err, detail)
        if cls.__name__ == "Redirect":
            err.master, err.path = detail, ""
        return err


def decode_response(lines: Union[str, Iterable[str]]) -> Response:
    """Parse one framed response, given as text or as a sequence of lines."""
    if isinstance(lines, str):
        lines = lines[:-1].split("\n") if lines.endswith("\n") else lines.split("\n")
    lines = [ln[:-1] if ln.endswith("\n") else ln for ln in lines]
    if not lines or lines[-1] != TERMINATOR:
        raise MalformedLine("response not terminated")
    status, body = lines[0], lines[1:-1]
    for row in body:
        if not row.startswith("|"):
            raise MalformedLine(f"bad data row {row!r}")
    rows = [row[1:] for row in body]
    if status == "OK":
        return Response(True, rows)
    if status.startswith("ERR "):
        parts = status.split(" ", 2)
        try:
            code = int(parts[1])
        except (IndexError, ValueError):
            raise MalformedLine(f"bad status {status!r}") from None
        return Response(False, rows, code, parts[2] if len(parts) > 2 else "")
    raise MalformedLine(f"bad status {status!r}")


class ResponseReader:
    """Accumulates lines until a complete response has arrived."""

    def __init__(self):
        self._buf: list[str] = []

    def feed(self, line: str) -> Response | None:
        line = line.rstrip("\n")
        self._buf.append(line)
        if line == TERMINATOR:
            lines, self._buf = self._buf, []
            return decode_response(lines)
        return None

    @property
    def pending(self) -> bool:
        return bool(self._buf)

"""Exception hierarchy shared by every layer.

Each error carries a stable three-digit wire code: 4xx for problems with the
request, 5xx for server-side failures.
"""

from __future__ import annotations


class CatalogError(Exception):
    code = 500
    default_message = "internal error"

    @property
    def message(self) -> str:
        if self.args and self.args[0]:
            return f"{self.default_message}: {self.args[0]}"
        return self.default_message


# protocol
class MalformedLine(CatalogError):
    code, default_message = 400, "malformed line"


class UnknownVerb(CatalogError):
    code, default_message = 401, "unknown verb"


# catalog
class BadName(CatalogError):
    code, default_message = 402, "bad name"


class BadCondition(CatalogError):
    code, default_message = 403, "bad condition"


class NotFound(CatalogError):
    code, default_message = 404, "not found"


class ParentNotFound(CatalogError):
    code, default_message = 405, "parent not found"


class ArityMismatch(CatalogError):
    code, default_message = 406, "arity mismatch"


class TypeMismatch(CatalogError):
    code, default_message = 407, "type mismatch"


class NoSuchAttribute(CatalogError):
    code, default_message = 408, "no such attribute"


class AlreadyExists(CatalogError):
    code, default_message = 409, "already exists"


class SubscriptionExpired(CatalogError):
    code, default_message = 410, "subscription expired"


class DuplicateAttribute(CatalogError):
    code, default_message = 411, "duplicate attribute"


class NotEmpty(CatalogError):
    code, default_message = 412, "directory not empty"


class CannotRemoveRoot(CatalogError):
    code, default_message = 413, "cannot remove root"


# replication
class DuplicateSubscription(CatalogError):
    code, default_message = 414, "duplicate subscription"


class NoSuchSubscription(CatalogError):
    code, default_message = 415, "no such subscription"


class RegressingAck(CatalogError):
    code, default_message = 416, "regressing ack"


class ResumeRejected(CatalogError):
    code, default_message = 417, "resume point precedes acknowledged position"


# federation / replica write guard
class Redirect(CatalogError):
    """A write hit a subtree mastered elsewhere."""

    code, default_message = 421, "redirect to master"

    def __init__(self, master: str, path: str = ""):
        super().__init__(master)
        self.master = master
        self.path = path


class OverlappingRoots(CatalogError):
    code, default_message = 422, "overlapping roots"

    def __init__(self, a: str, b: str):
        super().__init__(f"{a} {b}")
        self.roots = (a, b)


class UnknownNode(CatalogError):
    code, default_message = 423, "unknown node"


class ForwardLoop(CatalogError):
    code, default_message = 424, "command already forwarded"


# server side
class StorageFailure(CatalogError):
    code, default_message = 500, "storage failure"


class Conflict(CatalogError):
    """Write-write conflict; the transaction may be retried."""

    code, default_message = 501, "transaction conflict"


class OwnerUnreachable(CatalogError):
    code, default_message = 502, "owner unreachable"


class MasterUnreachable(CatalogError):
    code, default_message = 503, "master unreachable"


class ApplyFailed(CatalogError):
    code, default_message = 504, "log apply failed"


class GapDetected(CatalogError):
    code, default_message = 505, "log gap detected"


class SnapshotAborted(CatalogError):
    code, default_message = 506, "snapshot aborted"


ERROR_TABLE: dict[int, type[CatalogError]] = {}
for _cls in list(globals().values()):
    if isinstance(_cls, type) and issubclass(_cls, CatalogError) and _cls is not CatalogError:
        ERROR_TABLE[_cls.code] = _cls
del _cls

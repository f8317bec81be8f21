"""Master side of replication.

Every committed catalog change under a subscribed root is written to the
``log`` table inside the same transaction as the change.  Subscriptions live
in the ``subs`` table, so they survive restarts together with the catalog.
The shipping side (cursor per connected subscriber, GC, expiry) is driven by
the node's replication loop calling :meth:`ReplicationMaster.ship_pending`,
:meth:`garbage_collect_logs` and :meth:`expire_subscriptions`.
"""

from __future__ import annotations

import logging
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Optional

from . import condition as cond_mod
from . import paths
from .catalog import Catalog, Change, format_value
from .errors import (
    DuplicateSubscription,
    NoSuchSubscription,
    NotFound,
    RegressingAck,
    ResumeRejected,
    SubscriptionExpired,
)
from .storage import LOG_TABLE, StoreTxn
from .wire import encode_tokens

log = logging.getLogger(__name__)

SUBS = "subs"
CONNECTED, OFFLINE = "CONNECTED", "OFFLINE"
SCHEMA_VERBS = frozenset({"CREATEDIR", "REMOVEDIR", "ADDATTR", "REMOVEATTR"})


@dataclass(frozen=True)
class Filter:
    """Subtree root plus optional entry condition; no condition = plain subtree."""

    root: str
    cond: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "root", paths.normalize(self.root))
        if self.cond is not None and not self.cond.strip():
            object.__setattr__(self, "cond", None)
        object.__setattr__(self, "_parsed", cond_mod.parse(self.cond))

    @property
    def parsed(self):
        return self._parsed

    def covers(self, dir_path: str) -> bool:
        return paths.is_under(dir_path, self.root)

    def _entry_matches(self, img) -> bool:
        return img is not None and cond_mod.evaluate(self._parsed, dict(img))

    def matches(self, record: "LogRecord") -> bool:
        if not self.covers(record.dir):
            return False
        if self.cond is None or record.verb in SCHEMA_VERBS:
            return True
        return any(self._entry_matches(pre) or self._entry_matches(post)
                   for _, pre, post in record.effects)

    def transform(self, record: "LogRecord") -> Optional["LogRecord"]:
        """The record as this subscriber must see it, or None if it is filtered out.

        Entries moving into or out of the condition turn into ADDENTRY or
        DELENTRY so that the replica holds exactly the matching entries.
        """
        if not self.matches(record):
            return None
        if self.cond is None:
            return record
        flips = []
        for name, pre, post in record.effects:
            was, now = self._entry_matches(pre), self._entry_matches(post)
            if was and not now:
                flips.append(encode_tokens(["DELENTRY", paths.join(record.dir, name)]))
            elif now and not was:
                flips.append(encode_tokens(
                    ["ADDENTRY", paths.join(record.dir, name), *(format_value(v) for _, v in post)]
                ))
            else:
                flips.append(None)
        if record.verb in SCHEMA_VERBS:
            extra = tuple(f for f in flips if f is not None)
            return replace(record, followups=record.followups + extra) if extra else record
        if flips and flips[0] is not None:
            return replace(record, command=flips[0])
        return record


@dataclass(frozen=True)
class LogRecord:
    seq: int
    dir: str
    command: str
    ts: float = 0.0
    effects: tuple = ()
    followups: tuple = ()

    @property
    def verb(self) -> str:
        return self.command.split(" ", 1)[0]

    @property
    def commands(self) -> tuple:
        return (self.command, *self.followups)

    def to_row(self) -> dict:
        row = {"dir": self.dir, "cmd": self.command, "ts": self.ts}
        if self.effects:
            row["fx"] = [list(e) for e in self.effects]
        return row

    @classmethod
    def from_row(cls, seq: int, row: dict) -> "LogRecord":
        fx = tuple(tuple(e) for e in row.get("fx", ()))
        return cls(seq, row["dir"], row["cmd"], row.get("ts", 0.0), fx)

    def to_args(self, prev: int) -> list[str]:
        """Tokens of the ``LOG`` line carrying this record."""
        return [str(self.seq), str(prev), self.dir, *self.commands]

    @classmethod
    def from_args(cls, args) -> tuple["LogRecord", int]:
        seq, prev, dir_path, command, *followups = args
        return cls(int(seq), dir_path, command, followups=tuple(followups)), int(prev)


@dataclass
class Subscription:
    sub_id: str
    filter: Filter
    last_acked: int = 0
    state: str = CONNECTED
    offline_since: Optional[float] = None
    pending: int = 0

    def to_row(self) -> dict:
        return {
            "root": self.filter.root, "cond": self.filter.cond, "last_acked": self.last_acked,
            "state": self.state, "offline_since": self.offline_since, "pending": self.pending,
        }

    @classmethod
    def from_row(cls, sub_id: str, row: dict) -> "Subscription":
        return cls(sub_id, _filter(row["root"], row["cond"]), row["last_acked"], row["state"],
                   row["offline_since"], row["pending"])


_FILTERS: dict[tuple, Filter] = {}


def _filter(root: str, cond: Optional[str]) -> Filter:
    f = _FILTERS.get((root, cond))
    if f is None:
        f = _FILTERS[(root, cond)] = Filter(root, cond)
    return f


@dataclass
class MasterConfig:
    poll_interval: float = 0.1
    batch: int = 256
    expiry_timeout: float = 24 * 3600.0
    pending_threshold: int = 100_000
    gc_interval: float = 1.0
    expiry_interval: float = 1.0


@dataclass
class SnapshotStream:
    """Dump commands read from a frozen view, plus that view's log watermark."""

    commands: Iterator[str]
    watermark: int
    _view: object = field(repr=False, default=None)

    def close(self) -> None:
        if self._view is not None:
            self._view.close()
            self._view = None

    def __iter__(self):
        return self.commands

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ReplicationMaster:
    def __init__(self, catalog: Catalog, *, clock: Callable[[], float] = time.time,
                 config: Optional[MasterConfig] = None):
        self.catalog = catalog
        self.store = catalog.store
        self.clock = clock
        self.config = config or MasterConfig()
        self.counters: Counter = Counter()
        self.on_logged: list[Callable[[LogRecord], None]] = []
        self._cursors: dict[str, int] = {}
        catalog.listeners.append(self._on_change)

    # -- log generation -------------------------------------------------------
    def _on_change(self, txn: StoreTxn, change: Change) -> None:
        self.record_log(txn, change.dir, change.request.line.rstrip("\n"), change.effects)

    def record_log(self, txn: StoreTxn, dir_path: str, command: str, effects=()) -> int:
        """Append a log row in ``txn`` if a live subscription covers ``dir_path``.

        Returns the assigned sequence number, or 0 when nothing was logged.
        """
        subs = self._subs(txn)
        covering = [s for s in subs if s.filter.covers(dir_path)]
        if not covering:
            return 0
        fx = tuple((e.name, e.pre, e.post) for e in effects) \
            if any(s.filter.cond is not None for s in covering) else ()
        provisional = LogRecord(0, dir_path, command, self.clock(), fx)
        seq = txn.append_log(provisional.to_row())
        record = replace(provisional, seq=seq)
        for s in covering:
            if s.filter.matches(record):
                s.pending += 1
                txn.put(SUBS, ("sub", s.sub_id), s.to_row())

        def committed():
            self.counters["logged"] += 1
            for fn in self.on_logged:
                fn(record)

        txn.after_commit(committed)
        return seq

    # -- subscriptions ------------------------------------------------------------
    def _subs(self, reader) -> list[Subscription]:
        return [Subscription.from_row(k[1], row) for k, row in reader.items(SUBS, ("sub",))]

    def _get(self, reader, sub_id: str) -> Subscription:
        row = reader.get(SUBS, ("sub", sub_id))
        if row is None:
            if reader.get(SUBS, ("expired", sub_id)) is not None:
                raise SubscriptionExpired(sub_id)
            raise NoSuchSubscription(sub_id)
        return Subscription.from_row(sub_id, row)

    def subscriptions(self) -> list[Subscription]:
        with self.store.open_snapshot_view() as view:
            return self._subs(view)

    def get_subscription(self, sub_id: str) -> Subscription:
        with self.store.open_snapshot_view() as view:
            return self._get(view, sub_id)

    def is_expired(self, sub_id: str) -> bool:
        with self.store.open_snapshot_view() as view:
            return view.get(SUBS, ("expired", sub_id)) is not None

    def subscribe(self, sub_id: str, filter: Filter) -> Subscription:
        """Register (or re-register with the identical filter) a subscriber."""
        if not isinstance(filter, Filter):
            filter = Filter(*filter)

        def work(t):
            if not self.catalog.exists(filter.root, at=t):
                raise NotFound(filter.root)
            row = t.get(SUBS, ("sub", sub_id))
            if row is not None:
                sub = Subscription.from_row(sub_id, row)
                if sub.filter != filter:
                    raise DuplicateSubscription(sub_id)
                sub.state, sub.offline_since = CONNECTED, None
            else:
                sub = Subscription(sub_id, filter, last_acked=t.pending_log_high)
                t.delete(SUBS, ("expired", sub_id))
            t.put(SUBS, ("sub", sub_id), sub.to_row())
            return sub

        sub = self.store.with_transaction(work)
        self._cursors[sub_id] = sub.last_acked
        return sub

    def unsubscribe(self, sub_id: str) -> None:
        def work(t):
            if t.get(SUBS, ("sub", sub_id)) is None:
                raise NoSuchSubscription(sub_id)
            t.delete(SUBS, ("sub", sub_id))

        self.store.with_transaction(work)
        self._cursors.pop(sub_id, None)

    def resume(self, sub_id: str, first_needed: int) -> Subscription:
        """Mark the subscriber connected and ship from ``first_needed`` onward."""

        def work(t):
            sub = self._get(t, sub_id)
            if first_needed - 1 < sub.last_acked:
                raise ResumeRejected(f"needs {first_needed}, acknowledged {sub.last_acked}")
            sub.state, sub.offline_since = CONNECTED, None
            t.put(SUBS, ("sub", sub_id), sub.to_row())
            return sub

        sub = self.store.with_transaction(work)
        self._cursors[sub_id] = first_needed - 1
        return sub

    def disconnect(self, sub_id: str, now: Optional[float] = None) -> None:
        now = self.clock() if now is None else now
        self._cursors.pop(sub_id, None)

        def work(t):
            row = t.get(SUBS, ("sub", sub_id))
            if row is not None and row["state"] != OFFLINE:
                t.put(SUBS, ("sub", sub_id), {**row, "state": OFFLINE, "offline_since": now})

        self.store.with_transaction(work)

    def mark_all_offline(self, now: Optional[float] = None) -> None:
        """After a restart no subscriber is connected any more."""
        now = self.clock() if now is None else now
        self._cursors.clear()

        def work(t):
            for key, row in t.items(SUBS, ("sub",)):
                if row["state"] != OFFLINE:
                    t.put(SUBS, key, {**row, "state": OFFLINE, "offline_since": now})

        self.store.with_transaction(work)

    # -- snapshot ---------------------------------------------------------------
    def open_snapshot(self, sub_id: str) -> SnapshotStream:
        """Open a consistent dump of the subscriber's subtree.

        The returned watermark is the last log sequence visible to the dump;
        the subscriber needs records from watermark + 1 on.  Its acknowledged
        position jumps to the watermark, since nothing before it is needed.
        """
        view = self.store.open_snapshot_view()
        try:
            sub = self._get(view, sub_id)
            self._advance(sub_id, view.watermark, strict=False)
        except BaseException:
            view.close()
            raise
        self._cursors[sub_id] = max(view.watermark, self._cursors.get(sub_id, 0))
        if self.catalog.exists(sub.filter.root, at=view):
            commands = self.catalog.iter_dump(sub.filter.root, sub.filter.parsed, at=view)
        else:
            commands = iter(())
        return SnapshotStream(commands, view.watermark, view)

    def serve_snapshot(self, sub_id: str) -> tuple[list[str], int]:
        with self.open_snapshot(sub_id) as snap:
            return list(snap.commands), snap.watermark

    # -- shipping -----------------------------------------------------------------
    def ship_pending(self, sub_id: str, batch: Optional[int] = None) -> list[LogRecord]:
        """Up to ``batch`` filter-matching records past the subscriber's cursor."""
        batch = batch or self.config.batch
        with self.store.open_snapshot_view() as view:
            sub = self._get(view, sub_id)
        if sub.state != CONNECTED:
            return []
        cursor = self._cursors.get(sub_id, sub.last_acked)
        # everything up to here is committed; a gap below it was collected
        high = self.store.log_high
        out: list[LogRecord] = []
        while len(out) < batch:
            rows = self.store.scan_logs(cursor + 1, batch * 4)
            if not rows:
                cursor = max(cursor, high)
                break
            for seq, row in rows:
                cursor = seq
                rec = sub.filter.transform(LogRecord.from_row(seq, row))
                if rec is not None:
                    out.append(rec)
                    if len(out) == batch:
                        break
        self._cursors[sub_id] = cursor
        self.counters["shipped"] += len(out)
        return out

    def _matching_between(self, flt: Filter, lo: int, hi: int) -> int:
        n = 0
        seq = lo + 1
        while seq <= hi:
            rows = self.store.scan_logs(seq, 1024)
            if not rows:
                break
            for s, row in rows:
                if s > hi:
                    return n
                if flt.matches(LogRecord.from_row(s, row)):
                    n += 1
            seq = rows[-1][0] + 1
        return n

    def _advance(self, sub_id: str, seq: int, strict: bool = True) -> Subscription:
        def work(t):
            sub = self._get(t, sub_id)
            if seq < sub.last_acked and strict:
                raise RegressingAck(f"{seq} < {sub.last_acked}")
            if seq > sub.last_acked:
                done = self._matching_between(sub.filter, sub.last_acked, seq)
                sub.pending = max(0, sub.pending - done)
                sub.last_acked = seq
                t.put(SUBS, ("sub", sub_id), sub.to_row())
            return sub

        return self.store.with_transaction(work)

    def acknowledge(self, sub_id: str, seq: int) -> None:
        self._advance(sub_id, seq)
        self.counters["acks"] += 1

    # -- housekeeping -------------------------------------------------------------
    def garbage_collect_logs(self) -> int:
        """Delete every log record that no live subscription still needs."""

        def work(t):
            subs = [(s.filter, s.last_acked) for s in self._subs(t)]
            deleted = 0
            seq = 1
            while True:
                rows = self.store.scan_logs(seq, 4096)
                if not rows:
                    break
                for s, row in rows:
                    rec = LogRecord.from_row(s, row)
                    if all(s <= acked or not f.matches(rec) for f, acked in subs):
                        t.delete(LOG_TABLE, (s,))
                        deleted += 1
                seq = rows[-1][0] + 1
            return deleted

        deleted = self.store.with_transaction(work)
        self.counters["gc_deleted"] += deleted
        return deleted

    def expire_subscriptions(self, now: Optional[float] = None) -> list[str]:
        """Drop offline subscribers past the timeout or over the pending threshold."""
        now = self.clock() if now is None else now
        cfg = self.config

        def work(t):
            expired = []
            for sub in self._subs(t):
                if sub.state != OFFLINE:
                    continue
                too_old = sub.offline_since is not None and now - sub.offline_since > cfg.expiry_timeout
                if too_old or sub.pending > cfg.pending_threshold:
                    t.delete(SUBS, ("sub", sub.sub_id))
                    t.put(SUBS, ("expired", sub.sub_id), now)
                    expired.append(sub.sub_id)
            return expired

        expired = self.store.with_transaction(work)
        for sub_id in expired:
            self._cursors.pop(sub_id, None)
            log.info("expired subscription %s", sub_id)
        return expired

    def log_records(self) -> list[LogRecord]:
        return [LogRecord.from_row(s, r) for s, r in self.store.scan_logs(1, 1 << 62)]

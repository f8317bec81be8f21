"""Slave side of replication.

A :class:`ReplicaAgent` keeps one subscription's subtree current.  It does
no I/O itself: a driver (the simulator or the TCP runtime) dials the master
when :meth:`ReplicaAgent.due` says so, hands the connection over with
:meth:`connected`, feeds it incoming lines, and reports connection loss.

Exchange with the master::

    -> SUBSCRIBE <sub> <root> [<cond>]
    <- OK, |SNAPSHOT_BEGIN <sub> <root>, |<dump command>..., |SNAPSHOT_END <wm>, .
    -> RESUME <sub> <next_seq>
    <- OK, .
    <- LOG <seq> <prev> <dir> <command> [<followup>...]     (streamed)
    -> ACK <sub> <seq>                                      (streamed, batched)
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Optional

from . import paths
from .catalog import Catalog, target_path
from .errors import (
    ApplyFailed,
    CatalogError,
    GapDetected,
    MalformedLine,
    NoSuchSubscription,
    ResumeRejected,
    SnapshotAborted,
    SubscriptionExpired,
)
from .master import Filter, LogRecord
from .wire import MUTATING_VERBS, Request, ResponseReader, encode_request, parse_request, tokenize

log = logging.getLogger(__name__)

REPLICA = "replica"
BOOTSTRAPPING, STREAMING, DISCONNECTED = "BOOTSTRAPPING", "STREAMING", "DISCONNECTED"
EXECUTE_LOCAL, REJECT = "EXECUTE_LOCAL", "REJECT"


@dataclass
class SlaveConfig:
    ack_every: int = 64
    ack_interval: float = 0.5
    backoff_base: float = 1.0
    backoff_cap: float = 60.0
    discard: bool = False


@dataclass(frozen=True)
class ReplicaState:
    sub_id: str
    filter: Filter
    master_addr: str
    next_seq: int
    mode: str


def backoff_delay(attempt: int, base: float = 1.0, cap: float = 60.0) -> float:
    return min(cap, base * (2 ** attempt))


class ReplicaAgent:
    def __init__(self, catalog: Catalog, sub_id: str, filter: Filter, master_addr: str, *,
                 config: Optional[SlaveConfig] = None,
                 events: Optional[Callable[[str, str], None]] = None):
        self.catalog = catalog
        self.store = catalog.store
        self.sub_id = sub_id
        self.filter = filter if isinstance(filter, Filter) else Filter(*filter)
        self.master_addr = master_addr
        self.config = config or SlaveConfig()
        self._events = events
        self.mode = DISCONNECTED
        self.counters: Counter = Counter()
        self.applied: list[int] = []
        self.applied_at: dict[int, float] = {}
        self.bootstrap_wm: Optional[int] = None
        self.acks_sent: list[int] = []
        self.next_attempt = 0.0
        self._attempts = 0
        self._conn = None
        self._phase: Optional[str] = None
        self._reader = ResponseReader()
        self._unacked = 0
        self._last_ack = 0
        self._last_ack_time = 0.0
        self._load()

    # -- persisted state --------------------------------------------------------
    def _load(self):
        with self.store.open_snapshot_view() as view:
            row = view.get(REPLICA, ("rep", self.sub_id))
        if row is None:
            row = {"root": self.filter.root, "cond": self.filter.cond,
                   "master": self.master_addr, "next_seq": 0, "bootstrapped": False}
            self.store.with_transaction(lambda t: t.put(REPLICA, ("rep", self.sub_id), row))
        elif (row["root"], row["cond"]) != (self.filter.root, self.filter.cond):
            row = {**row, "root": self.filter.root, "cond": self.filter.cond, "bootstrapped": False}
            self.store.with_transaction(lambda t: t.put(REPLICA, ("rep", self.sub_id), row))
        self.next_seq = row["next_seq"]
        self.bootstrapped = row["bootstrapped"]
        # ``applied`` covers records from here on (volatile across restarts)
        self.applied_from = self.next_seq

    def _row(self) -> dict:
        return {"root": self.filter.root, "cond": self.filter.cond, "master": self.master_addr,
                "next_seq": self.next_seq, "bootstrapped": self.bootstrapped}

    def _persist(self, txn=None):
        if txn is not None:
            txn.put(REPLICA, ("rep", self.sub_id), self._row())
        else:
            self.store.with_transaction(lambda t: t.put(REPLICA, ("rep", self.sub_id), self._row()))

    @property
    def state(self) -> ReplicaState:
        return ReplicaState(self.sub_id, self.filter, self.master_addr, self.next_seq, self.mode)

    def _emit(self, kind: str, detail: str = ""):
        if self._events:
            self._events(kind, f"{self.sub_id} {detail}".rstrip())

    # -- connection lifecycle -----------------------------------------------------
    def due(self, now: float) -> bool:
        return self._conn is None and now >= self.next_attempt

    def connected(self, conn, now: float) -> None:
        self._conn = conn
        self._reader = ResponseReader()
        self._last_ack_time = now
        if self.bootstrapped:
            self._send_resume()
        else:
            self._send_subscribe()

    def connect_failed(self, now: float) -> None:
        self._conn = None
        self.mode = DISCONNECTED
        self._schedule_retry(now)

    def connection_lost(self, now: float) -> None:
        """The link to the master dropped; local reads keep working."""
        if self._conn is None:
            return
        self._conn = None
        self._phase = None
        self.mode = DISCONNECTED
        self.counters["disconnects"] += 1
        self._emit("disconnected")
        self._schedule_retry(now)

    def _schedule_retry(self, now: float):
        delay = backoff_delay(self._attempts, self.config.backoff_base, self.config.backoff_cap)
        self._attempts += 1
        self.next_attempt = now + delay

    def _drop(self, now: float):
        conn = self._conn
        self.connection_lost(now)
        if conn is not None:
            conn.close()

    def _send(self, verb: str, *args):
        self._conn.send(encode_request(verb, args))

    def _send_subscribe(self):
        self.mode = BOOTSTRAPPING
        self._phase = "subscribe"
        args = [self.sub_id, self.filter.root]
        if self.filter.cond is not None:
            args.append(self.filter.cond)
        self._send("SUBSCRIBE", *args)

    def _send_resume(self):
        self._phase = "resume"
        self._send("RESUME", self.sub_id, str(self.next_seq))

    # -- incoming traffic -----------------------------------------------------------
    def on_line(self, line: str, now: float) -> None:
        if self._conn is None:
            return
        if self._phase == "stream":
            try:
                req = parse_request(line)
                if req.verb != "LOG":
                    raise MalformedLine(f"unexpected {req.verb} while streaming")
                record, prev = LogRecord.from_args(req.args)
                self.apply_log(record, prev, now=now)
            except GapDetected:
                self._emit("gap", str(self.next_seq))
                self._drop(now)
            except ApplyFailed as exc:
                log.error("replica %s diverged: %s", self.sub_id, exc)
                self._emit("apply-failed", str(exc))
                self._drop(now)
            except (CatalogError, ValueError) as exc:
                log.error("bad replication line from master: %r (%s)", line, exc)
                self._drop(now)
            return
        resp = self._reader.feed(line)
        if resp is None:
            return
        if self._phase == "subscribe":
            if not resp.ok:
                self._emit("subscribe-refused", f"{resp.code} {resp.message}")
                self._drop(now)
                return
            try:
                self.apply_snapshot(resp.rows)
            except SnapshotAborted as exc:
                self._emit("snapshot-aborted", str(exc))
                self._drop(now)
                return
            self._send_resume()
        elif self._phase == "resume":
            if resp.ok:
                self.mode = STREAMING
                self._phase = "stream"
                self._attempts = 0
                self._emit("streaming", str(self.next_seq))
                return
            err = resp.error()
            if isinstance(err, (SubscriptionExpired, NoSuchSubscription, ResumeRejected)):
                self._emit("rebootstrap", f"{resp.code}")
                self.counters["rebootstraps"] += 1
                self.bootstrapped = False
                self._persist()
                self._send_subscribe()
            else:
                self._drop(now)

    def apply_snapshot(self, rows: list[str]) -> None:
        """Replace the local subtree with a snapshot, all in one transaction."""
        if not rows or not rows[0].startswith("SNAPSHOT_BEGIN") or \
                not rows[-1].startswith("SNAPSHOT_END"):
            raise SnapshotAborted("incomplete snapshot framing")
        try:
            end = tokenize(rows[-1])
            wm = int(end[1])
        except (CatalogError, IndexError, ValueError):
            raise SnapshotAborted(f"bad trailer {rows[-1]!r}") from None
        commands = rows[1:-1]

        def work(t):
            self.catalog.purge_subtree(self.filter.root, txn=t)
            self.catalog.ensure_directories(paths.ancestors(self.filter.root), txn=t)
            if not self.config.discard:
                self.catalog.restore(commands, txn=t, ensure_parents=False)
            self.next_seq = wm + 1
            self.bootstrapped = True
            self._persist(t)

        prev = (self.next_seq, self.bootstrapped)
        try:
            self.store.with_transaction(work)
        except CatalogError as exc:
            self.next_seq, self.bootstrapped = prev
            raise SnapshotAborted(str(exc)) from exc
        self.bootstrap_wm = wm
        self.applied_from = wm + 1
        self.applied = []
        self._last_ack = wm
        self.counters["bootstraps"] += 1
        self._emit("bootstrapped", f"wm={wm} commands={len(commands)}")

    def apply_log(self, record: LogRecord, prev: Optional[int] = None, *, now: float = 0.0) -> bool:
        """Apply one shipped record; returns False for an already-applied duplicate.

        ``prev`` is the sequence the master shipped just before this one on
        the current stream; anything beyond our last applied record means a
        record went missing.
        """
        if record.seq < self.next_seq:
            self.counters["duplicates"] += 1
            return False
        if prev is not None and prev > self.next_seq - 1:
            raise GapDetected(f"expected after {self.next_seq - 1}, master sent after {prev}")
        if self.config.discard:
            self.next_seq = record.seq + 1
        else:
            def work(t):
                for cmd in record.commands:
                    self.catalog.execute(parse_request(cmd), txn=t)
                self.next_seq = record.seq + 1
                self._persist(t)

            before = self.next_seq
            try:
                self.store.with_transaction(work)
            except CatalogError as exc:
                self.next_seq = before
                self.bootstrapped = False
                self._persist()
                self.counters["apply_failed"] += 1
                raise ApplyFailed(f"seq {record.seq}: {exc}") from exc
        self.applied.append(record.seq)
        self.applied_at[record.seq] = now
        self.counters["applied"] += 1
        self._unacked += 1
        if self._unacked >= self.config.ack_every:
            self._flush_ack(now)
        return True

    # -- acknowledgements -------------------------------------------------------------
    def _flush_ack(self, now: float):
        seq = self.next_seq - 1
        if self._conn is not None and self._phase == "stream" and seq > self._last_ack:
            self._send("ACK", self.sub_id, str(seq))
            self.acks_sent.append(seq)
            self._last_ack = seq
        self._unacked = 0
        self._last_ack_time = now

    def tick(self, now: float) -> None:
        if self._unacked and now - self._last_ack_time >= self.config.ack_interval:
            self._flush_ack(now)

    # -- write guard ------------------------------------------------------------------
    def guard_write(self, req: Request):
        """(EXECUTE_LOCAL, None) or (REJECT, master address) for a client request."""
        if req.verb in MUTATING_VERBS:
            target = target_path(req)
            if target is not None and self.filter.covers(target):
                return REJECT, self.master_addr
        return EXECUTE_LOCAL, None

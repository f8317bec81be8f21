"""Transactional multi-version store.

Tables hold tuple-keyed rows.  Every committed transaction bumps a global
version; each row keeps a short chain of ``(version, value)`` pairs so that
snapshot views opened at an older version keep reading it while writers move
on.  The ``log`` table is special only in that its keys are dense integer
sequence numbers handed out by :meth:`StoreTxn.append_log`.

:class:`Store` keeps everything in memory.  :class:`FileStore` adds a
checksummed append-only journal plus periodic checkpoints so that state
survives a process restart.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
import zlib
from collections import Counter, defaultdict
from pathlib import Path
from typing import Any, Callable, Iterable, Optional

from .errors import Conflict, StorageFailure

log = logging.getLogger(__name__)

LOG_TABLE = "log"
_TOMB = object()
_MISSING = object()
_HEADER = struct.Struct(">II")


class SimulatedCrash(Exception):
    """Raised by an injected fault; the store instance is dead afterwards."""


class _Reader:
    """Read API shared by transactions and snapshot views."""

    _store: "Store"
    version: int

    def _lookup(self, table: str, key: tuple):
        return self._store._read(table, key, self.version)

    def get(self, table: str, key: tuple, default=None):
        val = self._lookup(table, tuple(key))
        return default if val is _MISSING or val is _TOMB else val

    def keys(self, table: str, group: tuple) -> list[tuple]:
        return self._store._keys(table, tuple(group), self.version)

    def items(self, table: str, group: tuple) -> list[tuple[tuple, Any]]:
        return [(k, self.get(table, k)) for k in self.keys(table, group)]


class SnapshotView(_Reader):
    """A read-only view frozen at the version current when it was opened."""

    def __init__(self, store: "Store", version: int, watermark: int):
        self._store = store
        self.version = version
        self.watermark = watermark
        self._closed = False

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._store._unpin(self.version)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class StoreTxn(_Reader):
    def __init__(self, store: "Store", version: int, log_high: int):
        self._store = store
        self.version = version
        self._log_base = log_high
        self._writes: dict[tuple[str, tuple], Any] = {}
        self._groups: dict[tuple[str, tuple], set] = defaultdict(set)
        self._next_seq = log_high + 1
        self._after: list[Callable[[], None]] = []
        self.done = False

    def _lookup(self, table, key):
        val = self._writes.get((table, key), _MISSING)
        if val is not _MISSING:
            return val
        return super()._lookup(table, key)

    def put(self, table: str, key: tuple, value: Any) -> None:
        key = tuple(key)
        self._writes[(table, key)] = value
        self._groups[(table, key[:-1])].add(key)

    def delete(self, table: str, key: tuple) -> None:
        key = tuple(key)
        self._writes[(table, key)] = _TOMB
        self._groups[(table, key[:-1])].add(key)

    def keys(self, table, group):
        group = tuple(group)
        base = set(super().keys(table, group))
        for key in self._groups.get((table, group), ()):
            if self._writes[(table, key)] is _TOMB:
                base.discard(key)
            else:
                base.add(key)
        return sorted(base)

    def append_log(self, value: Any) -> int:
        """Add a row to the log table and return the sequence it will commit at."""
        seq = self._next_seq
        self._next_seq += 1
        self.put(LOG_TABLE, (seq,), value)
        return seq

    @property
    def pending_log_high(self) -> int:
        return self._next_seq - 1

    def after_commit(self, fn: Callable[[], None]) -> None:
        self._after.append(fn)

    def commit(self) -> None:
        self._store._commit(self)
        for fn in self._after:
            fn()

    def abort(self) -> None:
        self._store._finish(self)


class Store:
    """In-memory transactional store."""

    def __init__(self):
        self._tables: dict[str, dict[tuple, list]] = defaultdict(dict)
        self._index: dict[str, dict[tuple, set]] = defaultdict(lambda: defaultdict(set))
        self.version = 0
        self.log_high = 0
        self._log_low = 1
        self._pins: Counter = Counter()
        self._dirty: set[tuple[str, tuple]] = set()
        self._lock = threading.RLock()
        self._writer = threading.RLock()
        self.dead = False

    # -- public API ---------------------------------------------------------
    def begin(self) -> StoreTxn:
        self._check_alive()
        with self._lock:
            self._pins[self.version] += 1
            return StoreTxn(self, self.version, self.log_high)

    def with_transaction(self, work: Callable[[StoreTxn], Any], retries: int = 3) -> Any:
        """Run ``work`` in a transaction: commit on return, roll back on any error."""
        with self._writer:
            for attempt in range(retries + 1):
                txn = self.begin()
                try:
                    result = work(txn)
                    txn.commit()
                    return result
                except Conflict:
                    txn.abort()
                    if attempt == retries:
                        raise
                except BaseException:
                    txn.abort()
                    raise

    def open_snapshot_view(self) -> SnapshotView:
        self._check_alive()
        with self._lock:
            self._pins[self.version] += 1
            return SnapshotView(self, self.version, self.log_high)

    def scan_logs(self, from_seq: int, limit: int) -> list[tuple[int, Any]]:
        """Committed log rows with seq >= from_seq, ascending, at most ``limit``."""
        self._check_alive()
        out = []
        with self._lock:
            seq = max(from_seq, self._log_low)
            rows = self._tables[LOG_TABLE]
            while seq <= self.log_high and len(out) < limit:
                chain = rows.get((seq,))
                if chain is not None and chain[-1][1] is not _TOMB:
                    out.append((seq, chain[-1][1]))
                seq += 1
        return out

    def read(self) -> SnapshotView:
        """Shorthand for a view that the caller closes (or uses as a context manager)."""
        return self.open_snapshot_view()

    def table_size(self, table: str) -> int:
        with self._lock:
            return sum(1 for chain in self._tables[table].values() if chain[-1][1] is not _TOMB)

    def export(self) -> dict[str, dict[tuple, Any]]:
        """Latest committed value of every live row, table by table."""
        with self._lock:
            return {
                t: {k: chain[-1][1] for k, chain in rows.items() if chain[-1][1] is not _TOMB}
                for t, rows in self._tables.items()
            }

    def close(self) -> None:
        pass

    def revive(self) -> None:
        """Simulated restart of an in-memory store: committed data stays, pins go."""
        with self._lock:
            self.dead = False
            self._pins.clear()
            for table, rows in self._tables.items():
                for key in list(rows):
                    self._prune(table, key)

    # -- internals ----------------------------------------------------------
    def _check_alive(self):
        if self.dead:
            raise StorageFailure("store has crashed")

    def _read(self, table, key, version):
        with self._lock:
            chain = self._tables[table].get(key)
            if not chain:
                return _MISSING
            for ver, val in reversed(chain):
                if ver <= version:
                    return val
            return _MISSING

    def _keys(self, table, group, version):
        with self._lock:
            out = []
            rows = self._tables[table]
            for key in self._index[table].get(group, ()):
                for ver, val in reversed(rows[key]):
                    if ver <= version:
                        if val is not _TOMB:
                            out.append(key)
                        break
        out.sort()
        return out

    def _unpin(self, version):
        with self._lock:
            self._pins[version] -= 1
            if self._pins[version] <= 0:
                del self._pins[version]
            if self._dirty:
                for table, key in list(self._dirty):
                    self._prune(table, key)

    def _finish(self, txn: StoreTxn):
        if not txn.done:
            txn.done = True
            self._unpin(txn.version)

    def _commit(self, txn: StoreTxn):
        if txn.done:
            raise StorageFailure("transaction already finished")
        if not txn._writes:
            self._finish(txn)
            return
        self._check_alive()
        with self._lock:
            for (table, key) in txn._writes:
                if table == LOG_TABLE:
                    continue
                chain = self._tables[table].get(key)
                if chain and chain[-1][0] > txn.version:
                    self._finish(txn)
                    raise Conflict(f"{table} {key}")
            if txn._next_seq - 1 > txn._log_base and self.log_high != txn._log_base:
                self._finish(txn)
                raise Conflict("log table")
            new_version = self.version + 1
            new_high = max(self.log_high, txn._next_seq - 1)
            try:
                self._persist(new_version, new_high, txn._writes)
            except BaseException:
                self._finish(txn)
                raise
            self._apply(new_version, txn._writes.items())
            self.version = new_version
            self.log_high = new_high
            txn.done = True
            self._pins[txn.version] -= 1
            if self._pins[txn.version] <= 0:
                del self._pins[txn.version]
            for table, key in txn._writes:
                self._prune(table, key)

    def _apply(self, version, writes: Iterable):
        for (table, key), value in writes:
            rows = self._tables[table]
            chain = rows.get(key)
            if chain is None:
                rows[key] = [(version, value)]
                self._index[table][key[:-1]].add(key)
            else:
                chain.append((version, value))

    def _prune(self, table, key):
        rows = self._tables[table]
        chain = rows.get(key)
        if chain is None:
            self._dirty.discard((table, key))
            return
        floor = min(self._pins) if self._pins else self.version
        i = len(chain) - 1
        while i > 0 and chain[i][0] > floor:
            i -= 1
        if i > 0:
            del chain[:i]
        if len(chain) == 1 and chain[0][0] <= floor:
            self._dirty.discard((table, key))
            if chain[0][1] is _TOMB:
                del rows[key]
                group = self._index[table][key[:-1]]
                group.discard(key)
                if not group:
                    del self._index[table][key[:-1]]
                if table == LOG_TABLE:
                    while self._log_low <= self.log_high and (self._log_low,) not in rows:
                        self._log_low += 1
        else:
            self._dirty.add((table, key))

    def _persist(self, version, log_high, writes):
        """Durability hook; the in-memory store has nothing to do."""


# ---------------------------------------------------------------------------
# file backend

class CrashPlan:
    """Fault injection for :class:`FileStore`.

    ``after_bytes`` tears the journal write that would cross that many
    bytes (counted over the store's lifetime); ``at`` names a crash point
    such as ``"checkpoint:renamed"``.
    """

    def __init__(self, after_bytes: Optional[int] = None, at: Optional[str] = None):
        self.after_bytes = after_bytes
        self.at = at
        self.written = 0

    def point(self, name: str) -> None:
        if self.at == name:
            raise SimulatedCrash(name)


def _encode_key(key: tuple) -> list:
    return list(key)


def _frame(payload: bytes) -> bytes:
    return _HEADER.pack(len(payload), zlib.crc32(payload)) + payload


def read_journal(data: bytes) -> tuple[list[dict], int]:
    """Decode journal bytes; returns (records, offset of the valid prefix end)."""
    records, off = [], 0
    while off + _HEADER.size <= len(data):
        length, crc = _HEADER.unpack_from(data, off)
        start = off + _HEADER.size
        payload = data[start:start + length]
        if len(payload) < length or zlib.crc32(payload) != crc:
            break
        try:
            records.append(json.loads(payload))
        except ValueError:
            break
        off = start + length
    return records, off


class FileStore(Store):
    """Store persisted as ``checkpoint.json`` plus an append-only ``journal.log``.

    Journal records are ``[u32 length][u32 crc32][json payload]``, one per
    committed transaction.  Recovery loads the checkpoint, replays every
    intact record newer than it, and truncates a torn or corrupt tail.
    """

    JOURNAL = "journal.log"
    CHECKPOINT = "checkpoint.json"

    def __init__(self, directory, *, checkpoint_every: int = 1000, fsync: bool = True,
                 crash: Optional[CrashPlan] = None):
        super().__init__()
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.checkpoint_every = checkpoint_every
        self.fsync = fsync
        self.crash = crash
        self._since_checkpoint = 0
        self.recovered_records = 0
        self.truncated_bytes = 0
        self._recover()
        self._journal = open(self.directory / self.JOURNAL, "ab")

    def _recover(self):
        cp = self.directory / self.CHECKPOINT
        if cp.exists():
            state = json.loads(cp.read_text())
            self.version = state["v"]
            self.log_high = state["lh"]
            for table, rows in state["tables"].items():
                self._apply(self.version, (((table, tuple(k)), v) for k, v in rows))
        jpath = self.directory / self.JOURNAL
        if jpath.exists():
            data = jpath.read_bytes()
            records, valid = read_journal(data)
            for rec in records:
                if rec["v"] <= self.version:
                    continue
                writes = [((t, tuple(k)), _TOMB if dead else v) for t, k, v, dead in rec["w"]]
                self._apply(rec["v"], writes)
                self.version = rec["v"]
                self.log_high = rec["lh"]
                self.recovered_records += 1
                for (t, k), _ in writes:
                    self._prune(t, k)
            if valid < len(data):
                self.truncated_bytes = len(data) - valid
                log.warning("truncating %d corrupt journal bytes in %s", self.truncated_bytes, jpath)
                with open(jpath, "r+b") as fh:
                    fh.truncate(valid)
        rows = self._tables[LOG_TABLE]
        live = [k[0] for k in rows]
        self._log_low = min(live) if live else self.log_high + 1

    def _write(self, data: bytes):
        plan = self.crash
        if plan is not None and plan.after_bytes is not None:
            room = plan.after_bytes - plan.written
            if len(data) > room:
                self._journal.write(data[:max(room, 0)])
                self._journal.flush()
                plan.written += max(room, 0)
                self.dead = True
                raise SimulatedCrash(f"torn write at byte {plan.after_bytes}")
            plan.written += len(data)
        self._journal.write(data)
        self._journal.flush()
        if self.fsync:
            os.fsync(self._journal.fileno())

    def _persist(self, version, log_high, writes):
        w = [
            [table, _encode_key(key), None if value is _TOMB else value, value is _TOMB]
            for (table, key), value in writes.items()
        ]
        payload = json.dumps({"v": version, "lh": log_high, "w": w}, separators=(",", ":"))
        try:
            if self.crash:
                self.crash.point("commit:before-write")
            self._write(_frame(payload.encode()))
        except SimulatedCrash:
            self.dead = True
            raise
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc
        self._since_checkpoint += 1

    def _commit(self, txn):
        super()._commit(txn)
        if self.checkpoint_every and self._since_checkpoint >= self.checkpoint_every:
            self.checkpoint()

    def checkpoint(self) -> None:
        with self._lock:
            tables = {
                t: [[_encode_key(k), chain[-1][1]] for k, chain in rows.items()
                    if chain[-1][1] is not _TOMB]
                for t, rows in self._tables.items()
            }
            state = {"v": self.version, "lh": self.log_high, "tables": tables}
            tmp = self.directory / (self.CHECKPOINT + ".tmp")
            try:
                with open(tmp, "w") as fh:
                    json.dump(state, fh, separators=(",", ":"))
                    fh.flush()
                    if self.fsync:
                        os.fsync(fh.fileno())
                if self.crash:
                    self.crash.point("checkpoint:written")
                os.replace(tmp, self.directory / self.CHECKPOINT)
                if self.crash:
                    self.crash.point("checkpoint:renamed")
                self._journal.close()
                self._journal = open(self.directory / self.JOURNAL, "wb")
            except SimulatedCrash:
                self.dead = True
                raise
            except OSError as exc:
                raise StorageFailure(str(exc)) from exc
            self._since_checkpoint = 0

    def close(self) -> None:
        if not self._journal.closed:
            self._journal.close()


def open_store(spec: str | os.PathLike | None, **kwargs) -> Store:
    """``None`` or ``"memory"`` gives an in-memory store, anything else a directory."""
    if spec is None or str(spec) == "memory":
        return Store()
    return FileStore(spec, **kwargs)

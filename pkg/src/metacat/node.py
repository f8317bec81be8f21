"""A catalog node: catalog + replication master + replica agents + routing.

The node is transport-agnostic.  A driver creates a :class:`Session` for
each accepted connection and feeds it lines; it calls :meth:`Node.tick`
periodically to run the replication loop (log shipping, snapshot streaming,
ack timers, GC and expiry).  Connections are any object with
``send(text)`` and ``close()``.
"""

from __future__ import annotations

import logging
import threading
import time
from typing import Callable, Iterable, Optional

from .catalog import Catalog
from .errors import CatalogError, MalformedLine, OwnerUnreachable, Redirect
from .federation import PHYSICAL, MastershipMap, RootAssignment, route_command, validate_map
from .master import Filter, MasterConfig, ReplicationMaster
from .slave import REJECT, ReplicaAgent, SlaveConfig
from .storage import Store
from .wire import Request, encode_request, encode_response, encode_tokens, parse_request

log = logging.getLogger(__name__)

Forwarder = Callable[[RootAssignment, Request], list]


class Session:
    """Server side of one connection: request/response, or a replication stream."""

    def __init__(self, node: "Node", conn):
        self.node = node
        self.conn = conn
        self.origin: Optional[str] = None
        self.sub_id: Optional[str] = None
        self.prev = 0
        self._snapshot = None
        self.closed = False

    def reply(self, result) -> None:
        self.conn.send(encode_response(result))

    def on_line(self, line: str) -> None:
        if self.closed:
            return
        with self.node.lock:
            if self.sub_id is not None:
                self._on_stream_line(line)
                return
            if self._snapshot is not None:
                log.warning("request while a snapshot is in flight; dropping connection")
                self.close()
                return
            try:
                req = parse_request(line)
            except CatalogError as exc:
                self.reply(exc)
                return
            if req.verb == "VIA":
                self.origin = req.args[0] if req.args else "?"
                return
            origin, self.origin = self.origin, None
            try:
                rows = self._dispatch(req, origin)
            except CatalogError as exc:
                self.reply(exc)
                return
            if rows is not None:
                self.reply(rows)
            if req.verb == "QUIT":
                self.close()

    def _on_stream_line(self, line: str) -> None:
        try:
            req = parse_request(line)
            if req.verb == "ACK" and len(req.args) == 2 and req.args[0] == self.sub_id:
                self.node.master.acknowledge(self.sub_id, int(req.args[1]))
                return
            if req.verb == "QUIT":
                self.close()
                return
            raise MalformedLine(f"unexpected {req.verb} on a replication stream")
        except (CatalogError, ValueError) as exc:
            log.warning("closing stream %s: %s", self.sub_id, exc)
            self.close()

    def _dispatch(self, req: Request, origin: Optional[str]):
        master, args = self.node.master, req.args
        try:
            if req.verb == "SUBSCRIBE":
                if len(args) not in (2, 3):
                    raise MalformedLine("SUBSCRIBE <sub_id> <root> [<cond>]")
                sub = master.subscribe(args[0], Filter(args[1], args[2] if len(args) == 3 else None))
                self._snapshot = (master.open_snapshot(sub.sub_id), sub.sub_id)
                self.conn.send("OK\n|" + encode_tokens(["SNAPSHOT_BEGIN", sub.sub_id, sub.filter.root]) + "\n")
                self.pump_snapshot()
                return None
            if req.verb == "RESUME":
                if len(args) != 2:
                    raise MalformedLine("RESUME <sub_id> <first_needed_seq>")
                first = int(args[1])
                for old in [s for s in self.node.streams if s.sub_id == args[0]]:
                    old.close()
                master.resume(args[0], first)
                self.reply([])
                self.sub_id, self.prev = args[0], first - 1
                self.node.streams[self] = None
                return None
            if req.verb == "ACK":
                if len(args) != 2:
                    raise MalformedLine("ACK <sub_id> <seq>")
                master.acknowledge(args[0], int(args[1]))
                return []
            if req.verb == "UNSUBSCRIBE":
                if len(args) != 1:
                    raise MalformedLine("UNSUBSCRIBE <sub_id>")
                master.unsubscribe(args[0])
                return []
        except ValueError as exc:
            raise MalformedLine(str(exc)) from None
        if req.verb in ("LOG", "SNAPSHOT_BEGIN", "SNAPSHOT_END"):
            raise MalformedLine(f"{req.verb} is sent by masters only")
        return self.node.handle(req, origin)

    def pump_snapshot(self) -> None:
        if self._snapshot is None:
            return
        snap, sub_id = self._snapshot
        limit = self.node.snapshot_chunk or None
        out = []
        try:
            for cmd in snap.commands:
                out.append(f"|{cmd}\n")
                if limit is not None and len(out) >= limit:
                    break
            else:
                out.append("|" + encode_tokens(["SNAPSHOT_END", str(snap.watermark)]) + "\n.\n")
                snap.close()
                self._snapshot = None
        except CatalogError as exc:
            log.error("snapshot for %s failed: %s", sub_id, exc)
            self.close()
            return
        self.conn.send("".join(out))

    def pump(self) -> int:
        """Ship every pending record to the subscriber on this stream."""
        if self.sub_id is None or self.closed:
            return 0
        master, sent = self.node.master, 0
        try:
            while True:
                records = master.ship_pending(self.sub_id)
                if not records:
                    break
                lines = []
                for rec in records:
                    lines.append(encode_request("LOG", rec.to_args(self.prev)))
                    self.prev = rec.seq
                self.conn.send("".join(lines))
                sent += len(records)
        except CatalogError as exc:
            log.info("stream %s ended: %s", self.sub_id, exc)
            self.close()
        return sent

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.conn.close()
            self.connection_lost()

    def connection_lost(self) -> None:
        self.closed = True
        with self.node.lock:
            if self._snapshot is not None:
                self._snapshot[0].close()
                self._snapshot = None
            if self.sub_id is not None:
                self.node.streams.pop(self, None)
                try:
                    self.node.master.disconnect(self.sub_id)
                except CatalogError:
                    pass
            self.node.sessions.pop(self, None)


class Node:
    def __init__(
        self,
        node_id: str,
        store: Optional[Store] = None,
        *,
        addr: Optional[str] = None,
        clock: Callable[[], float] = time.time,
        master_config: Optional[MasterConfig] = None,
        slave_config: Optional[SlaveConfig] = None,
        fed_map: Optional[MastershipMap] = None,
        subscriptions: Iterable = (),
        forwarder: Optional[Forwarder] = None,
        events: Optional[Callable[[str, str], None]] = None,
        snapshot_chunk: int = 0,
    ):
        self.node_id = node_id
        self.addr = addr or f"{node_id}:0"
        self.clock = clock
        self.lock = threading.RLock()
        self.catalog = Catalog(store)
        self.store = self.catalog.store
        self.master = ReplicationMaster(self.catalog, clock=clock, config=master_config)
        self.slave_config = slave_config or SlaveConfig()
        self.forwarder = forwarder
        self.events = events
        self.snapshot_chunk = snapshot_chunk
        # dicts rather than sets: iteration order must not depend on ids
        self.sessions: dict[Session, None] = {}
        self.streams: dict[Session, None] = {}
        self.agents: dict[str, ReplicaAgent] = {}
        self.fed_map = None
        now = clock()
        self._next_poll = self._next_gc = self._next_expiry = now
        self.master.mark_all_offline(now)
        for sub_id, flt, master_addr in subscriptions:
            self.add_replica(sub_id, flt, master_addr)
        if fed_map is not None:
            self.set_map(fed_map)

    def _emit(self, kind: str, detail: str):
        if self.events:
            self.events(kind, f"{self.node_id} {detail}")

    # -- configuration ----------------------------------------------------------
    def add_replica(self, sub_id: str, flt, master_addr: str) -> ReplicaAgent:
        flt = flt if isinstance(flt, Filter) else Filter(*flt)
        for other in self.agents.values():
            if other.sub_id != sub_id and (other.filter.covers(flt.root) or flt.covers(other.filter.root)):
                raise CatalogError(f"replica roots overlap: {flt.root} {other.filter.root}")
        agent = ReplicaAgent(self.catalog, sub_id, flt, master_addr, config=self.slave_config,
                             events=lambda k, d: self._emit(k, d))
        self.agents[sub_id] = agent
        return agent

    def set_map(self, fed_map: MastershipMap) -> None:
        fed_map.self_id = self.node_id
        validate_map(fed_map)
        self.fed_map = fed_map
        for r in fed_map.roots:
            if r.owner != self.node_id and r.mode == PHYSICAL:
                sub_id = f"{self.node_id}:{r.root}"
                if sub_id not in self.agents:
                    self.add_replica(sub_id, Filter(r.root), r.addr)

    # -- request handling ----------------------------------------------------------
    def open_session(self, conn) -> Session:
        s = Session(self, conn)
        with self.lock:
            self.sessions[s] = None
        return s

    def guard_write(self, req: Request) -> None:
        for agent in self.agents.values():
            decision, master = agent.guard_write(req)
            if decision == REJECT:
                raise Redirect(master, agent.filter.root)

    def _execute_local(self, req: Request) -> list[str]:
        self.guard_write(req)
        return self.catalog.execute(req)

    def _forward(self, owner: RootAssignment, req: Request) -> list[str]:
        if self.forwarder is None:
            raise OwnerUnreachable(owner.owner)
        return self.forwarder(owner, req)

    def handle(self, req: Request, origin: Optional[str] = None) -> list[str]:
        """Execute a client request, honouring replica guards and federation."""
        with self.lock:
            if self.fed_map is not None:
                return route_command(self.fed_map, req, execute_local=self._execute_local,
                                     forward=self._forward, origin=origin)
            return self._execute_local(req)

    def request(self, line: str) -> str:
        """One request line in, one framed response out (no streaming verbs)."""
        try:
            req = parse_request(line)
            if req.verb == "VIA":
                raise MalformedLine("VIA needs a connection")
            return encode_response(self.handle(req))
        except CatalogError as exc:
            return encode_response(exc)

    # -- replication loop -----------------------------------------------------------
    def tick(self, now: Optional[float] = None) -> None:
        now = self.clock() if now is None else now
        with self.lock:
            for agent in self.agents.values():
                agent.tick(now)
            cfg = self.master.config
            if now >= self._next_poll:
                self._next_poll = now + cfg.poll_interval
                for s in list(self.sessions):
                    s.pump_snapshot()
                for s in list(self.streams):
                    s.pump()
            if now >= self._next_gc:
                self._next_gc = now + cfg.gc_interval
                self.master.garbage_collect_logs()
            if now >= self._next_expiry:
                self._next_expiry = now + cfg.expiry_interval
                for sub_id in self.master.expire_subscriptions(now):
                    self._emit("expired", sub_id)
                    for s in list(self.streams):
                        if s.sub_id == sub_id:
                            s.close()

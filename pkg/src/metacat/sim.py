"""Deterministic in-process cluster simulation.

Everything runs on one thread against a virtual clock.  Events sit in a
heap ordered by (time, insertion counter), so a given seed and script
always produce the same interleaving and the same trace.

The virtual network carries text between :class:`metacat.node.Session`
objects and replica agents.  Each link has a latency and a drop
probability; a drop resets the connection (TCP never loses bytes
silently).  Partitions and dead nodes reset connections too.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import CatalogError, MasterUnreachable, OwnerUnreachable
from .federation import MastershipMap, RootAssignment
from .master import Filter, LogRecord, MasterConfig
from .node import Node
from .slave import STREAMING, SlaveConfig
from .storage import FileStore, Store
from .wire import ResponseReader, encode_request


class Scheduler:
    """A heap of timed callbacks driven by a virtual clock."""

    def __init__(self, start: float = 0.0):
        self.now = start
        self._queue: list = []
        self._count = 0

    def at(self, when: float, fn: Callable[[], None]) -> None:
        self._count += 1
        heapq.heappush(self._queue, (max(when, self.now), self._count, fn))

    def after(self, delay: float, fn: Callable[[], None]) -> None:
        self.at(self.now + delay, fn)

    def run_until(self, until: float) -> None:
        q = self._queue
        while q and q[0][0] <= until:
            when, _, fn = heapq.heappop(q)
            self.now = when
            fn()
        self.now = max(self.now, until)

    def pending(self) -> int:
        return len(self._queue)


class _End:
    """One side of a virtual connection; quacks like a socket wrapper."""

    def __init__(self, net: "VirtualNetwork", owner: str, peer_owner: str):
        self.net = net
        self.owner = owner
        self.peer_owner = peer_owner
        self.peer: Optional[_End] = None
        self.on_line: Callable[[str], None] = lambda line: None
        self.on_close: Callable[[], None] = lambda: None
        self.open = True
        self.conn_id = 0

    def send(self, text: str) -> None:
        if self.open:
            self.net._deliver(self, text)

    def close(self) -> None:
        if self.open:
            self.net._reset(self, notify_self=False)


@dataclass
class Link:
    latency: float = 0.0
    drop: float = 0.0


class VirtualNetwork:
    def __init__(self, sched: Scheduler, rng: random.Random, *, latency: float = 0.0,
                 drop: float = 0.0, trace: Optional[Callable[[str], None]] = None,
                 trace_messages: bool = True):
        self.sched = sched
        self.rng = rng
        self.default = Link(latency, drop)
        self.links: dict[frozenset, Link] = {}
        self.partitions: set[frozenset] = set()
        self.down: set[str] = set()
        self.trace = trace or (lambda msg: None)
        self.trace_messages = trace_messages
        self.conns: list[_End] = []
        self.in_flight = 0
        self._ids = 0

    def link(self, a: str, b: str) -> Link:
        return self.links.get(frozenset((a, b)), self.default)

    def set_link(self, a: str, b: str, latency: float, drop: float = 0.0) -> None:
        self.links[frozenset((a, b))] = Link(latency, drop)

    def reachable(self, a: str, b: str) -> bool:
        return a not in self.down and b not in self.down and frozenset((a, b)) not in self.partitions

    def connect(self, src: str, dst: str) -> Optional[tuple[_End, _End]]:
        if not self.reachable(src, dst):
            return None
        self._ids += 1
        a, b = _End(self, src, dst), _End(self, dst, src)
        a.peer, b.peer = b, a
        a.conn_id = b.conn_id = self._ids
        self.conns.extend((a, b))
        return a, b

    def _deliver(self, end: _End, text: str) -> None:
        link = self.link(end.owner, end.peer_owner)
        if not self.reachable(end.owner, end.peer_owner) or (link.drop and self.rng.random() < link.drop):
            self.trace(f"reset #{end.conn_id} {end.owner}->{end.peer_owner}")
            self._reset(end, notify_self=True)
            return
        if self.trace_messages:
            first = text.split("\n", 1)[0]
            n = text.count("\n")
            self.trace(f"send #{end.conn_id} {end.owner}->{end.peer_owner} {first[:60]}"
                       + (f" (+{n - 1} lines)" if n > 1 else ""))
        peer = end.peer
        self.in_flight += 1

        def arrive():
            self.in_flight -= 1
            if not peer.open:
                return
            for line in text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"):
                if not peer.open:
                    break
                peer.on_line(line)

        self.sched.after(link.latency, arrive)

    def _reset(self, end: _End, *, notify_self: bool) -> None:
        peer = end.peer
        for e in (end, peer):
            e.open = False
        self.conns = [c for c in self.conns if c.open]
        latency = self.link(end.owner, end.peer_owner).latency
        self.in_flight += 1

        def notify_peer():
            self.in_flight -= 1
            peer.on_close()

        self.sched.after(latency, notify_peer)
        if notify_self:
            end.on_close()

    def cut(self, pred: Callable[[_End], bool]) -> None:
        """Reset every open connection with an end matching ``pred``; both sides hear at once."""
        for e in list(self.conns):
            if e.open and pred(e):
                self.trace(f"reset #{e.conn_id} {e.owner}-{e.peer_owner}")
                e.open = e.peer.open = False
                e.on_close()
                e.peer.on_close()
        self.conns = [c for c in self.conns if c.open]


@dataclass
class ReplicaSpec:
    sub_id: str
    master: str
    root: str
    cond: Optional[str] = None


@dataclass
class NodeSpec:
    node_id: str
    store_dir: Optional[str] = None
    replicas: list[ReplicaSpec] = field(default_factory=list)


class SimCluster:
    """Nodes wired through a :class:`VirtualNetwork`; all timing is virtual."""

    def __init__(self, seed: int = 0, *, latency: float = 0.0, drop: float = 0.0,
                 master_config: Optional[MasterConfig] = None,
                 slave_config: Optional[SlaveConfig] = None,
                 snapshot_chunk: int = 0, tick_interval: float = 0.05,
                 trace_messages: bool = True):
        self.seed = seed
        self.rng = random.Random(seed)
        self.sched = Scheduler()
        self.trace: list[str] = []
        self.net = VirtualNetwork(self.sched, self.rng, latency=latency, drop=drop,
                                  trace=self._trace, trace_messages=trace_messages)
        self.master_config = master_config or MasterConfig()
        self.slave_config = slave_config or SlaveConfig()
        self.snapshot_chunk = snapshot_chunk
        self.tick_interval = tick_interval
        self.specs: dict[str, NodeSpec] = {}
        self.stores: dict[str, Store] = {}
        self.nodes: dict[str, Node] = {}
        self.fed_map: Optional[MastershipMap] = None
        self.history: dict[str, dict[int, LogRecord]] = {}
        self.started = False
        self._epoch: dict[str, int] = {}

    # -- bookkeeping ----------------------------------------------------------------
    def _trace(self, msg: str) -> None:
        self.trace.append(f"{self.sched.now:10.3f} {msg}")

    def now(self) -> float:
        return self.sched.now

    @staticmethod
    def addr(node_id: str) -> str:
        return f"{node_id}:0"

    def node_for_addr(self, addr: str) -> str:
        return addr.split()[-1].rsplit(":", 1)[0]

    # -- setup ------------------------------------------------------------------------
    def add_node(self, node_id: str, store_dir: Optional[str] = None) -> NodeSpec:
        if node_id in self.specs:
            raise ValueError(f"duplicate node {node_id}")
        spec = NodeSpec(node_id, store_dir)
        self.specs[node_id] = spec
        self.history[node_id] = {}
        if self.started:
            self._boot(node_id)
        return spec

    def add_replica(self, node_id: str, sub_id: str, master: str, root: str,
                    cond: Optional[str] = None) -> None:
        spec = ReplicaSpec(sub_id, master, root, cond)
        self.specs[node_id].replicas.append(spec)
        node = self.nodes.get(node_id)
        if node is not None:
            node.add_replica(sub_id, Filter(root, cond), self.addr(master))

    def set_map(self, fed_map: MastershipMap) -> None:
        self.fed_map = fed_map
        for node in self.nodes.values():
            node.set_map(MastershipMap(list(fed_map.roots)))

    def start(self) -> None:
        if self.started:
            return
        self.started = True
        for node_id in self.specs:
            self._boot(node_id)

    def _open_store(self, node_id: str) -> Store:
        spec = self.specs[node_id]
        if spec.store_dir is None:
            store = self.stores.get(node_id) or Store()
            store.revive()
        else:
            store = FileStore(spec.store_dir, fsync=False)
        self.stores[node_id] = store
        return store

    def _boot(self, node_id: str) -> None:
        spec = self.specs[node_id]
        store = self._open_store(node_id)
        node = Node(
            node_id, store, addr=self.addr(node_id), clock=self.now,
            master_config=self.master_config, slave_config=self.slave_config,
            subscriptions=[(r.sub_id, Filter(r.root, r.cond), self.addr(r.master)) for r in spec.replicas],
            forwarder=lambda owner, req, src=node_id: self._forward(src, owner, req),
            events=lambda kind, detail: self._trace(f"{kind} {detail}"),
            snapshot_chunk=self.snapshot_chunk,
        )
        if self.fed_map is not None:
            node.set_map(MastershipMap(list(self.fed_map.roots)))
        hist = self.history[node_id]
        node.master.on_logged.append(lambda rec: hist.__setitem__(rec.seq, rec))
        self.nodes[node_id] = node
        self.net.down.discard(node_id)
        epoch = self._epoch[node_id] = self._epoch.get(node_id, 0) + 1
        self._trace(f"boot {node_id}")
        self.sched.after(0, lambda: self._tick_loop(node_id, epoch))

    def _tick_loop(self, node_id: str, epoch: int) -> None:
        if self._epoch.get(node_id) != epoch or node_id not in self.nodes:
            return
        node = self.nodes[node_id]
        now = self.now()
        for agent in node.agents.values():
            if agent.due(now):
                self._dial(node_id, agent)
        node.tick(now)
        self.sched.after(self.tick_interval, lambda: self._tick_loop(node_id, epoch))

    def _dial(self, node_id: str, agent) -> None:
        target = self.node_for_addr(agent.master_addr)
        now = self.now()
        pair = self.net.connect(node_id, target) if target in self.nodes else None
        if pair is None:
            self._trace(f"dial-failed {node_id}->{target} {agent.sub_id}")
            agent.connect_failed(now)
            return
        client, server = pair
        session = self.nodes[target].open_session(server)
        server.on_line = session.on_line
        server.on_close = session.connection_lost
        client.on_line = lambda line: agent.on_line(line, self.now())
        client.on_close = lambda: agent.connection_lost(self.now())
        self._trace(f"dial #{client.conn_id} {node_id}->{target} {agent.sub_id}")
        agent.connected(client, now)

    def _forward(self, src: str, owner: RootAssignment, req) -> list[str]:
        """Virtual-replica forwarding; synchronous, but through the wire codec."""
        target = self.node_for_addr(owner.addr)
        if target not in self.nodes or not self.net.reachable(src, target):
            raise OwnerUnreachable(owner.owner)
        out: list[str] = []

        class _Capture:
            def send(self, text):
                out.append(text)

            def close(self):
                pass

        session = self.nodes[target].open_session(_Capture())
        reader = ResponseReader()
        session.on_line(encode_request("VIA", [src]).rstrip("\n"))
        session.on_line(req.line.rstrip("\n"))
        session.connection_lost()
        resp = None
        for line in "".join(out).split("\n"):
            resp = reader.feed(line) or resp
        if resp is None:
            raise OwnerUnreachable(owner.owner)
        if not resp.ok:
            raise resp.error()
        return resp.rows

    # -- faults -----------------------------------------------------------------------
    def crash(self, node_id: str) -> None:
        node = self.nodes.pop(node_id, None)
        if node is None:
            return
        self._trace(f"crash {node_id}")
        store = self.stores[node_id]
        store.dead = True
        self.net.down.add(node_id)
        self.net.cut(lambda e: e.owner == node_id or e.peer_owner == node_id)
        if isinstance(store, FileStore):
            store.close()

    def restart(self, node_id: str) -> None:
        if node_id in self.nodes:
            self.crash(node_id)
        self._trace(f"restart {node_id}")
        self._boot(node_id)

    def partition(self, a: str, b: str) -> None:
        self._trace(f"partition {a} {b}")
        self.net.partitions.add(frozenset((a, b)))
        self.net.cut(lambda e: {e.owner, e.peer_owner} == {a, b})

    def heal(self) -> None:
        self._trace("heal")
        self.net.partitions.clear()

    # -- driving ----------------------------------------------------------------------
    def advance(self, seconds: float) -> None:
        self.start()
        self.sched.run_until(self.now() + seconds)

    def client(self, node_id: str, line: str) -> str:
        self.start()
        node = self.nodes.get(node_id)
        if node is None:
            raise MasterUnreachable(node_id)
        return node.request(line)

    def agents(self):
        for node_id, node in self.nodes.items():
            for agent in node.agents.values():
                yield node_id, agent

    def quiescent(self) -> bool:
        if self.net.in_flight:
            return False
        for node_id, agent in self.agents():
            master_id = self.node_for_addr(agent.master_addr)
            master = self.nodes.get(master_id)
            if master is None or not self.net.reachable(node_id, master_id):
                continue
            if agent.mode != STREAMING or agent._unacked:
                return False
            if any(s.sub_id == agent.sub_id and s._snapshot for s in master.sessions):
                return False
            if master.master._cursors.get(agent.sub_id, -1) < master.store.log_high:
                return False
        return True

    def drain(self, max_time: float = 900.0, step: float = 0.1) -> float:
        """Run until every reachable replica has everything; returns the virtual time spent."""
        self.start()
        start = self.now()
        while not self.quiescent():
            if self.now() - start > max_time:
                raise TimeoutError(f"cluster did not drain within {max_time} s")
            self.advance(step)
        # final acks have landed; give every master one GC cycle
        self.advance(self.master_config.gc_interval + self.tick_interval)
        self._trace("drained")
        return self.now() - start

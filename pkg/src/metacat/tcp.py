"""Real sockets for a :class:`metacat.node.Node`.

One thread per accepted connection feeds lines into a session; a ticker
thread drives the replication loop and dials masters for replica agents.
All node state is guarded by ``node.lock``.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time
from typing import Optional

from .errors import OwnerUnreachable
from .federation import RootAssignment
from .node import Node
from .wire import ResponseReader, encode_request

log = logging.getLogger(__name__)

FORWARD_TIMEOUT = 5.0


def split_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.strip().rpartition(":")
    return host or "127.0.0.1", int(port)


class SocketConn:
    """``send``/``close`` over a connected socket, safe to call from any thread."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._lock = threading.Lock()
        self.closed = False

    def send(self, text: str) -> None:
        if self.closed:
            return
        try:
            with self._lock:
                self.sock.sendall(text.encode())
        except OSError:
            self.close()

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()


def _read_lines(sock: socket.socket, on_line) -> None:
    """Feed LF-terminated lines to ``on_line`` until EOF."""
    f = sock.makefile("r", encoding="utf-8", newline="\n")
    try:
        for line in f:
            on_line(line[:-1] if line.endswith("\n") else line)
    except (OSError, ValueError):
        pass


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        node: Node = self.server.node
        conn = SocketConn(self.request)
        session = node.open_session(conn)
        try:
            _read_lines(self.request, session.on_line)
        finally:
            session.connection_lost()
            conn.close()


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class NodeServer:
    """Serve ``node`` on ``host:port`` (port 0 picks a free one)."""

    def __init__(self, node: Node, host: str = "127.0.0.1", port: int = 0, *,
                 tick_interval: float = 0.05):
        self.node = node
        self.tick_interval = tick_interval
        self._server = _Server((host, port), _Handler)
        self._server.node = node
        h, p = self._server.server_address[:2]
        self.address = f"{h}:{p}"
        node.addr = self.address
        if node.forwarder is None:
            node.forwarder = lambda owner, req: forward(node.node_id, owner, req)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self) -> "NodeServer":
        for target in (self._server.serve_forever, self._ticker):
            t = threading.Thread(target=target, daemon=True, name=f"{self.node.node_id}-{target.__name__}")
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        self._stop.set()
        self._server.shutdown()
        self._server.server_close()
        with self.node.lock:
            sessions = list(self.node.sessions)
            agents = list(self.node.agents.values())
        for s in sessions:
            s.close()
        for a in agents:
            if a._conn is not None:
                a._conn.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _ticker(self) -> None:
        node = self.node
        while not self._stop.wait(self.tick_interval):
            now = node.clock()
            with node.lock:
                due = [a for a in node.agents.values() if a.due(now)]
            for agent in due:
                self._dial(agent)
            try:
                node.tick(now)
            except Exception:  # keep the loop alive; the next tick retries
                log.exception("tick failed on %s", node.node_id)

    def _dial(self, agent) -> None:
        node = self.node
        try:
            sock = socket.create_connection(split_addr(agent.master_addr), timeout=FORWARD_TIMEOUT)
            sock.settimeout(None)
        except (OSError, ValueError) as exc:
            log.info("%s: cannot reach master %s: %s", agent.sub_id, agent.master_addr, exc)
            with node.lock:
                agent.connect_failed(node.clock())
            return
        conn = SocketConn(sock)
        with node.lock:
            agent.connected(conn, node.clock())

        def on_line(line):
            with node.lock:
                if agent._conn is conn:
                    agent.on_line(line, node.clock())

        def reader():
            _read_lines(sock, on_line)
            with node.lock:
                if agent._conn is conn:
                    agent.connection_lost(node.clock())
            conn.close()

        threading.Thread(target=reader, daemon=True, name=f"{agent.sub_id}-reader").start()


def request(addr: str, line: str, *, timeout: float = FORWARD_TIMEOUT, via: Optional[str] = None):
    """Send one request to ``addr`` and return its decoded response."""
    with socket.create_connection(split_addr(addr), timeout=timeout) as sock:
        if via is not None:
            sock.sendall(encode_request("VIA", [via]).encode())
        sock.sendall((line.rstrip("\n") + "\n").encode())
        reader = ResponseReader()
        f = sock.makefile("r", encoding="utf-8", newline="\n")
        for raw in f:
            resp = reader.feed(raw.rstrip("\n"))
            if resp is not None:
                return resp
    raise ConnectionError(f"{addr} closed the connection mid-response")


def forward(self_id: str, owner: RootAssignment, req) -> list[str]:
    """Forwarder for virtual replicas: replay ``req`` at the owner, marked as forwarded."""
    deadline = time.monotonic() + FORWARD_TIMEOUT
    try:
        resp = request(owner.addr, req.line, timeout=max(0.1, deadline - time.monotonic()), via=self_id)
    except (OSError, ConnectionError, ValueError) as exc:
        raise OwnerUnreachable(f"{owner.owner} at {owner.addr}: {exc}") from None
    if not resp.ok:
        raise resp.error()
    return resp.rows


class Client:
    """A blocking line client that keeps one connection open."""

    def __init__(self, addr: str, timeout: float = 30.0):
        self.sock = socket.create_connection(split_addr(addr), timeout=timeout)
        self._file = self.sock.makefile("r", encoding="utf-8", newline="\n")

    def send(self, line: str):
        self.sock.sendall((line.rstrip("\n") + "\n").encode())
        reader = ResponseReader()
        for raw in self._file:
            resp = reader.feed(raw.rstrip("\n"))
            if resp is not None:
                return resp
        raise ConnectionError("server closed the connection")

    def close(self) -> None:
        self._file.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

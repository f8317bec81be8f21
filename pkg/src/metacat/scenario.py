"""Scripted multi-node scenarios on the simulated cluster.

A scenario file is line oriented; ``#`` starts a comment.  Setup lines come
first, then steps::

    SET latency 0.02            # default link latency in seconds
    NODE M                      # in-memory node
    NODE S file                 # file-backed node (survives RESTART from disk)
    SUBSCRIBE S s1 M /a "n > 3" # replica on S of M's /a, optional condition
    MAP /b B VIRTUAL            # federation map entry (owner address is implied)
    LINK M S 0.05 0.01          # per-link latency and drop probability

    CLIENT M CREATEDIR /a n:INT
    INSERT M /a 100 50          # 100 generated entries at 50/s (omit rate: at once)
    UPDATE M /a 20              # random SETATTR on existing entries
    DELETE M /a 5
    CRASH M | RESTART M | PARTITION M S | HEAL | ADVANCE 2.5 | DRAIN
    CHECK converged
    CHECK logs_empty M
    CHECK sub M s1 CONNECTED    # or OFFLINE, ABSENT, EXPIRED
    CHECK pending M s1 0
    CHECK mode S s1 STREAMING
    CHECK ok S FIND /a
    CHECK err S 404 GETATTR /a/nope
    CHECK redirect S M ADDENTRY /a/x 1
    CHECK same S M FIND /a "n > 3"
    CHECK rows S 10 FIND /a

Every CHECK also re-verifies catalog invariants on all running nodes and
prefix delivery on every replica.
"""

from __future__ import annotations

import difflib
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from . import paths
from .errors import CatalogError
from .federation import PHYSICAL, VIRTUAL, MastershipMap, RootAssignment, validate_map
from .master import Filter, MasterConfig
from .slave import SlaveConfig
from .sim import SimCluster
from .wire import decode_response, encode_tokens, tokenize


class ScenarioMalformed(ValueError):
    pass


class AssertionFailed(AssertionError):
    pass


SETTINGS = {
    "latency": float, "drop": float, "snapshot_chunk": int, "tick": float,
    "poll_interval": float, "batch": int, "expiry_timeout": float,
    "pending_threshold": int, "gc_interval": float, "expiry_interval": float,
    "ack_every": int, "ack_interval": float, "backoff_base": float, "backoff_cap": float,
}
SETUP = {"SET", "NODE", "SUBSCRIBE", "MAP", "LINK"}
STEPS = {"CLIENT", "INSERT", "UPDATE", "DELETE", "CRASH", "RESTART", "PARTITION",
         "HEAL", "ADVANCE", "DRAIN", "CHECK", "SUBSCRIBE"}
CHECKS = {"converged", "logs_empty", "sub", "pending", "mode", "ok", "err",
          "redirect", "same", "rows"}


@dataclass
class Step:
    lineno: int
    verb: str
    args: list[str]
    rest: str = ""

    @property
    def text(self) -> str:
        return " ".join([self.verb, *self.args, self.rest]).strip()


@dataclass
class Scenario:
    settings: dict = field(default_factory=dict)
    nodes: list[tuple[str, bool]] = field(default_factory=list)
    subscriptions: list[tuple] = field(default_factory=list)
    roots: list[tuple[str, str, str]] = field(default_factory=list)
    links: list[tuple[str, str, float, float]] = field(default_factory=list)
    steps: list[Step] = field(default_factory=list)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Scenario":
        return cls.parse(Path(path).read_text())

    @classmethod
    def parse(cls, text: str) -> "Scenario":
        sc = cls()
        names: set[str] = set()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = _strip_comment(raw).strip()
            if not line:
                continue
            try:
                sc._parse_line(lineno, line, names)
            except (CatalogError, ValueError, IndexError) as exc:
                if isinstance(exc, ScenarioMalformed):
                    raise
                why = exc.message if isinstance(exc, CatalogError) else exc
                raise ScenarioMalformed(f"line {lineno}: {why}") from None
        return sc

    def _parse_line(self, lineno: int, line: str, names: set[str]) -> None:
        verb = line.split(None, 1)[0].upper()
        bad = lambda why: ScenarioMalformed(f"line {lineno}: {why}")  # noqa: E731
        if verb in SETUP and verb != "SUBSCRIBE" and self.steps:
            raise bad(f"{verb} after the first step")
        if verb not in SETUP | STEPS:
            raise bad(f"unknown keyword {verb}")
        if verb in ("CLIENT",):
            parts = line.split(None, 2)
            if len(parts) < 3:
                raise bad("CLIENT <node> <request>")
            self._need(parts[1], names, bad)
            self.steps.append(Step(lineno, verb, [parts[1]], parts[2]))
            return
        if verb == "CHECK":
            self.steps.append(self._parse_check(lineno, line, names, bad))
            return
        toks = tokenize(line)[1:]
        if verb == "SET":
            key, value = toks
            if key not in SETTINGS:
                raise bad(f"unknown setting {key}")
            self.settings[key] = SETTINGS[key](value)
        elif verb == "NODE":
            if not toks or len(toks) > 2 or (len(toks) == 2 and toks[1] != "file"):
                raise bad("NODE <id> [file]")
            if toks[0] in names:
                raise bad(f"duplicate node {toks[0]}")
            paths.check_name(toks[0])
            names.add(toks[0])
            self.nodes.append((toks[0], len(toks) == 2))
        elif verb == "SUBSCRIBE":
            if len(toks) not in (4, 5):
                raise bad("SUBSCRIBE <slave> <sub_id> <master> <root> [<cond>]")
            self._need(toks[0], names, bad)
            self._need(toks[2], names, bad)
            flt = Filter(toks[3], toks[4] if len(toks) == 5 else None)
            flt.parsed  # validates the condition syntax
            entry = (toks[0], toks[1], toks[2], flt.root, flt.cond)
            if self.steps:
                self.steps.append(Step(lineno, verb, [str(t) for t in toks]))
            else:
                self.subscriptions.append(entry)
        elif verb == "MAP":
            root, owner, mode = toks
            self._need(owner, names, bad)
            if mode.upper() not in (PHYSICAL, VIRTUAL):
                raise bad(f"mode must be PHYSICAL or VIRTUAL, not {mode}")
            self.roots.append((paths.normalize(root), owner, mode.upper()))
            validate_map(MastershipMap([RootAssignment(r, o, f"{o}:0", m) for r, o, m in self.roots]))
        elif verb == "LINK":
            a, b, latency, *drop = toks
            self._need(a, names, bad)
            self._need(b, names, bad)
            self.links.append((a, b, float(latency), float(drop[0]) if drop else 0.0))
        elif verb in ("INSERT", "UPDATE", "DELETE"):
            if len(toks) not in (3, 4):
                raise bad(f"{verb} <node> <dir> <count> [<rate>]")
            self._need(toks[0], names, bad)
            int(toks[2])
            if len(toks) == 4 and float(toks[3]) <= 0:
                raise bad("rate must be positive")
            self.steps.append(Step(lineno, verb, toks))
        elif verb in ("CRASH", "RESTART"):
            (node,) = toks
            self._need(node, names, bad)
            self.steps.append(Step(lineno, verb, toks))
        elif verb == "PARTITION":
            a, b = toks
            self._need(a, names, bad)
            self._need(b, names, bad)
            self.steps.append(Step(lineno, verb, toks))
        elif verb in ("HEAL", "DRAIN"):
            if toks:
                raise bad(f"{verb} takes no arguments")
            self.steps.append(Step(lineno, verb, []))
        elif verb == "ADVANCE":
            (secs,) = toks
            if float(secs) < 0:
                raise bad("cannot go back in time")
            self.steps.append(Step(lineno, verb, toks))

    @staticmethod
    def _need(node: str, names: set[str], bad) -> None:
        if node not in names:
            raise bad(f"unknown node {node}")

    def _parse_check(self, lineno, line, names, bad) -> Step:
        parts = line.split(None, 2)
        if len(parts) < 2 or parts[1] not in CHECKS:
            raise bad(f"CHECK needs one of {', '.join(sorted(CHECKS))}")
        kind, tail = parts[1], parts[2] if len(parts) == 3 else ""
        fixed = {"converged": 0, "logs_empty": 1, "sub": 3, "pending": 3, "mode": 3,
                 "ok": 1, "err": 2, "redirect": 2, "same": 2, "rows": 2}[kind]
        if kind == "converged":
            args = tokenize(tail) if tail else []
            for n in args:
                self._need(n, names, bad)
            return Step(lineno, "CHECK", [kind, *args])
        pieces = tail.split(None, fixed)
        takes_request = kind in ("ok", "err", "redirect", "same", "rows")
        if len(pieces) != fixed + takes_request:
            raise bad(f"wrong arguments for CHECK {kind}")
        args, rest = (pieces[:fixed], pieces[fixed]) if takes_request else (pieces, "")
        self._need(args[0], names, bad)
        if kind in ("redirect", "same"):
            self._need(args[1], names, bad)
        if kind in ("err", "rows", "pending"):
            int(args[1] if kind != "pending" else args[2])
        return Step(lineno, "CHECK", [kind, *args], rest)


def _strip_comment(line: str) -> str:
    """Drop a ``#`` comment unless it sits inside a double-quoted token."""
    quoted = escaped = False
    for i, ch in enumerate(line):
        if escaped:
            escaped = False
        elif ch == "\\":
            escaped = True
        elif ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            return line[:i]
    return line


@dataclass
class CheckResult:
    lineno: int
    text: str
    ok: bool
    detail: str = ""


@dataclass
class ScenarioResult:
    trace: list[str]
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.ok]

    def trace_text(self) -> str:
        return "".join(line + "\n" for line in self.trace)


class _Runner:
    def __init__(self, sc: Scenario, seed: int, workdir: Path):
        s = sc.settings
        mcfg = MasterConfig(**{k: s[k] for k in ("poll_interval", "batch", "expiry_timeout",
                                                  "pending_threshold", "gc_interval",
                                                  "expiry_interval") if k in s})
        scfg = SlaveConfig(**{k: s[k] for k in ("ack_every", "ack_interval", "backoff_base",
                                                 "backoff_cap") if k in s})
        self.sc = sc
        self.cluster = SimCluster(seed, latency=s.get("latency", 0.0), drop=s.get("drop", 0.0),
                                  master_config=mcfg, slave_config=scfg,
                                  snapshot_chunk=s.get("snapshot_chunk", 0),
                                  tick_interval=s.get("tick", 0.05))
        c = self.cluster
        for node_id, file_backed in sc.nodes:
            c.add_node(node_id, str(workdir / node_id) if file_backed else None)
        for slave, sub_id, master, root, cond in sc.subscriptions:
            c.add_replica(slave, sub_id, master, root, cond)
        if sc.roots:
            c.set_map(MastershipMap([RootAssignment(r, o, c.addr(o), m) for r, o, m in sc.roots]))
        for a, b, latency, drop in sc.links:
            c.net.set_link(a, b, latency, drop)
        self.checks: list[CheckResult] = []
        self.counter: dict[str, int] = {}

    # -- steps --------------------------------------------------------------------------
    def run(self) -> ScenarioResult:
        c = self.cluster
        for step in self.sc.steps:
            getattr(self, "_step_" + step.verb.lower())(step)
        return ScenarioResult(c.trace, self.checks)

    def _client(self, node: str, line: str) -> str:
        c = self.cluster
        try:
            out = c.client(node, line)
        except CatalogError as exc:
            out = f"ERR {exc.code} {exc.message}\n.\n"
        first = out.split("\n", 1)[0]
        rows = out.count("\n|")
        c._trace(f"client {node} {line} -> {first}" + (f" [{rows} rows]" if rows else ""))
        return out

    def _step_client(self, step: Step):
        self._client(step.args[0], step.rest)

    def _step_subscribe(self, step: Step):
        a = step.args
        self.cluster.start()
        self.cluster.add_replica(a[0], a[1], a[2], a[3], a[4] if len(a) == 5 else None)
        self.cluster._trace(f"subscribe {' '.join(a)}")

    def _schedule(self, step: Step, make_line):
        node, dir_path, count = step.args[0], paths.normalize(step.args[1]), int(step.args[2])
        rate = float(step.args[3]) if len(step.args) == 4 else None
        c = self.cluster
        c.start()
        for k in range(count):
            run = lambda: (lambda ln: ln and self._client(node, ln))(make_line(node, dir_path))  # noqa: E731
            if rate is None:
                run()
            else:
                c.sched.after(k / rate, run)

    def _step_insert(self, step: Step):
        def make(node, dir_path):
            cat = self._catalog(node)
            if cat is None or not cat.exists(dir_path):
                return f"ADDENTRY {paths.join(dir_path, 'orphan')}"
            n = self.counter[dir_path] = self.counter.get(dir_path, 0) + 1
            values = [self._value(a.type) for a in cat.schema(dir_path)]
            return encode_tokens(["ADDENTRY", paths.join(dir_path, f"e{n:05d}"), *values])

        self._schedule(step, make)

    def _step_update(self, step: Step):
        def make(node, dir_path):
            cat = self._catalog(node)
            if cat is None or not cat.exists(dir_path):
                return None
            entries = cat.list_directory(dir_path)[1]
            attrs = cat.schema(dir_path)
            if not entries or not attrs:
                return None
            name = self.cluster.rng.choice(entries)
            a = self.cluster.rng.choice(attrs)
            return encode_tokens(["SETATTR", paths.join(dir_path, name), a.name, self._value(a.type)])

        self._schedule(step, make)

    def _step_delete(self, step: Step):
        def make(node, dir_path):
            cat = self._catalog(node)
            if cat is None or not cat.exists(dir_path):
                return None
            entries = cat.list_directory(dir_path)[1]
            if not entries:
                return None
            return encode_tokens(["DELENTRY", paths.join(dir_path, self.cluster.rng.choice(entries))])

        self._schedule(step, make)

    def _catalog(self, node: str):
        n = self.cluster.nodes.get(node)
        return n.catalog if n is not None else None

    def _value(self, type_name: str) -> str:
        rng = self.cluster.rng
        if type_name == "INT":
            return str(rng.randrange(10))
        if type_name == "FLOAT":
            return repr(round(rng.uniform(0, 10), 3))
        if type_name == "TIMESTAMP":
            return str(1_700_000_000 + rng.randrange(10**6))
        return rng.choice(["alpha", "beta", "gamma", "delta", "raw data", "tag%1"])

    def _step_crash(self, step):
        self.cluster.crash(step.args[0])

    def _step_restart(self, step):
        self.cluster.restart(step.args[0])

    def _step_partition(self, step):
        self.cluster.partition(*step.args)

    def _step_heal(self, step):
        self.cluster.heal()

    def _step_advance(self, step):
        self.cluster.advance(float(step.args[0]))

    def _step_drain(self, step):
        try:
            self.cluster.drain()
        except TimeoutError as exc:
            self.checks.append(CheckResult(step.lineno, step.text, False, str(exc)))

    # -- checks ---------------------------------------------------------------------------
    def _step_check(self, step: Step):
        self.cluster.start()
        try:
            detail = getattr(self, "_check_" + step.args[0])(step.args[1:], step.rest)
        except CatalogError as exc:
            detail = f"{type(exc).__name__}: {exc.message}"
        except AssertionFailed as exc:
            detail = str(exc)
        problems = self._invariants()
        if problems:
            detail = "; ".join(filter(None, [detail, *problems]))
        ok = not detail
        self.checks.append(CheckResult(step.lineno, step.text, ok, detail or ""))
        self.cluster._trace(f"check line {step.lineno} {'pass' if ok else 'FAIL'}: {step.text}")

    def _invariants(self) -> list[str]:
        c, out = self.cluster, []
        for node_id, node in c.nodes.items():
            try:
                node.catalog.check_invariants()
            except AssertionError as exc:
                out.append(f"invariant broken on {node_id}: {exc}")
        for node_id, agent in c.agents():
            hist = c.history.get(c.node_for_addr(agent.master_addr), {})
            expected = [s for s in sorted(hist)
                        if agent.applied_from <= s < agent.next_seq and agent.filter.matches(hist[s])]
            if agent.applied != expected:
                out.append(f"prefix delivery broken on {node_id}/{agent.sub_id}: "
                           f"applied {agent.applied[:10]}... expected {expected[:10]}...")
        return out

    def _check_converged(self, args, rest) -> str:
        c, diffs = self.cluster, []
        for node_id, agent in c.agents():
            if args and node_id not in args:
                continue
            master_id = c.node_for_addr(agent.master_addr)
            master = c.nodes.get(master_id)
            if master is None:
                diffs.append(f"{agent.sub_id}: master {master_id} is down")
                continue
            node = c.nodes[node_id]
            root, cond = agent.filter.root, agent.filter.parsed
            want = master.catalog.dump_subtree(root, cond) if master.catalog.exists(root) else []
            got = node.catalog.dump_subtree(root) if node.catalog.exists(root) else []
            if want != got:
                diff = "\n".join(difflib.unified_diff(want, got, f"{master_id}:{root}",
                                                      f"{node_id}:{root}", lineterm="", n=1))
                diffs.append(f"{agent.sub_id} diverged\n{diff}")
        return "\n".join(diffs)

    def _check_logs_empty(self, args, rest) -> str:
        node = self._up(args[0])
        n = node.store.table_size("log")
        return "" if n == 0 else f"{n} log records remain on {args[0]}"

    def _check_sub(self, args, rest) -> str:
        node_id, sub_id, want = args
        master = self._up(node_id).master
        subs = {s.sub_id: s for s in master.subscriptions()}
        if sub_id in subs:
            state = subs[sub_id].state
        else:
            state = "EXPIRED" if master.is_expired(sub_id) else "ABSENT"
        return "" if state == want.upper() else f"{sub_id} is {state}, expected {want}"

    def _check_pending(self, args, rest) -> str:
        node_id, sub_id, want = args
        sub = self._up(node_id).master.get_subscription(sub_id)
        return "" if sub.pending == int(want) else f"{sub_id} pending {sub.pending}, expected {want}"

    def _check_mode(self, args, rest) -> str:
        node_id, sub_id, want = args
        agent = self._up(node_id).agents.get(sub_id)
        if agent is None:
            return f"no replica {sub_id} on {node_id}"
        return "" if agent.mode == want.upper() else f"{sub_id} is {agent.mode}, expected {want}"

    def _respond(self, node_id: str, line: str):
        self._up(node_id)
        return decode_response(self._client(node_id, line))

    def _check_ok(self, args, rest) -> str:
        resp = self._respond(args[0], rest)
        return "" if resp.ok else f"got ERR {resp.code} {resp.message}"

    def _check_err(self, args, rest) -> str:
        resp = self._respond(args[0], rest)
        if resp.ok:
            return f"expected ERR {args[1]}, got OK"
        return "" if resp.code == int(args[1]) else f"expected ERR {args[1]}, got {resp.code} {resp.message}"

    def _check_redirect(self, args, rest) -> str:
        resp = self._respond(args[0], rest)
        addr = self.cluster.addr(args[1])
        if resp.ok or resp.code != 421 or addr not in resp.message:
            got = "OK" if resp.ok else f"ERR {resp.code} {resp.message}"
            return f"expected a redirect naming {addr}, got {got}"
        return ""

    def _check_same(self, args, rest) -> str:
        a, b = (self._respond(n, rest) for n in args)
        if (a.ok, a.rows, a.code) == (b.ok, b.rows, b.code):
            return ""
        diff = difflib.unified_diff(a.rows, b.rows, args[0], args[1], lineterm="", n=1)
        return f"responses differ ({a.ok}/{a.code} vs {b.ok}/{b.code})\n" + "\n".join(diff)

    def _check_rows(self, args, rest) -> str:
        resp = self._respond(args[0], rest)
        if not resp.ok:
            return f"got ERR {resp.code} {resp.message}"
        return "" if len(resp.rows) == int(args[1]) else f"{len(resp.rows)} rows, expected {args[1]}"

    def _up(self, node_id: str):
        node = self.cluster.nodes.get(node_id)
        if node is None:
            raise AssertionFailed(f"node {node_id} is down")
        return node


def run_scenario(scenario: Union[Scenario, str], seed: int = 0, *,
                 workdir: Optional[Union[str, Path]] = None,
                 raise_on_failure: bool = False) -> ScenarioResult:
    """Boot the scenario's nodes on a virtual network and execute its script.

    ``scenario`` is a parsed :class:`Scenario` or the text of one.  Failed
    CHECKs are collected in the result; with ``raise_on_failure`` the first
    one raises :class:`AssertionFailed` carrying its diff.
    """
    sc = Scenario.parse(scenario) if isinstance(scenario, str) else scenario
    with tempfile.TemporaryDirectory(prefix="metacat-sim-") as tmp:
        runner = _Runner(sc, seed, Path(workdir) if workdir is not None else Path(tmp))
        try:
            result = runner.run()
        finally:
            for store in runner.cluster.stores.values():
                store.close()
    if raise_on_failure and result.failures:
        f = result.failures[0]
        raise AssertionFailed(f"line {f.lineno}: {f.text}\n{f.detail}")
    return result

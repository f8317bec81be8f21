"""Acceptance criteria, one test (or group) per criterion.

Run ``pytest tests/test_acceptance.py`` and read the "acceptance criteria"
section at the end of the output: one PASS/FAIL line per criterion.
The benchmark defaults to full size (10,000 entries at 90/s); set
``METACAT_BENCH_ENTRIES=2000 METACAT_BENCH_RATE=200`` for a quicker run.
"""

import os
import random
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from crashlab import crash_once, crash_points, make_workload, reference_states
from filterlab import check_pair, gc_schedule
from oracles import RefCatalog, dump_model, parse_cond
from test_golden import GOLDEN, count_exchanges, replay
from test_wire import random_request

from metacat import paths
from metacat.bench import fit_work_units, sweep
from metacat.errors import OverlappingRoots
from metacat.federation import PHYSICAL, VIRTUAL, MastershipMap, RootAssignment, validate_map
from metacat.master import MasterConfig
from metacat.node import Node
from metacat.scenario import Scenario, ScenarioMalformed, _Runner, run_scenario
from metacat.sim import SimCluster
from metacat.slave import DISCONNECTED, SlaveConfig
from metacat.wire import MUTATING_VERBS, decode_response, parse_request

SCENARIOS = sorted((Path(__file__).parent.parent / "scenarios").glob("*.scn"))


def criterion(n, name):
    return pytest.mark.criterion(n, name)


# -- 1 ----------------------------------------------------------------------------------
def _owner(cluster, node_id, line):
    """Which node's catalog a client line lands in."""
    if cluster.fed_map is None:
        return node_id
    target = parse_request(line).args[0]
    for r in cluster.fed_map.roots:
        if paths.is_under(paths.normalize(target), r.root):
            return r.owner
    return node_id


def _replicated(cluster, master_id, target):
    path = paths.normalize(target)
    return any(cluster.node_for_addr(a.master_addr) == master_id and paths.is_under(path, a.filter.root)
               for _, a in cluster.agents())


def run_with_model(path, seed):
    """Run a scenario while mirroring every accepted write into a reference model.

    Returns the scenario result plus the list of (replica, expected, got) dumps,
    where ``expected`` comes from the model and never from the package.
    """
    sc = Scenario.load(path)
    with tempfile.TemporaryDirectory() as tmp:
        runner = _Runner(sc, seed, Path(tmp))
        c = runner.cluster
        models: dict[str, RefCatalog] = {}
        inner = runner._client

        def client(node, line):
            out = inner(node, line)
            req = parse_request(line)
            if out.startswith("OK") and req.verb in MUTATING_VERBS:
                owner = _owner(c, node, line)
                applied = models.setdefault(owner, RefCatalog()).apply(req.verb, list(req.args))
                # local writes beside a replica may lean on ancestors the model never saw
                assert applied.ok or not _replicated(c, owner, req.args[0]), \
                    f"model rejects accepted {line!r}"
            return out

        runner._client = client
        try:
            result = runner.run()
            c.drain()
            dumps = []
            for node_id, agent in c.agents():
                master_id = c.node_for_addr(agent.master_addr)
                if master_id not in c.nodes or not c.net.reachable(node_id, master_id):
                    continue
                root = agent.filter.root
                model = models.get(master_id, RefCatalog())
                expected = dump_model(*model.subtree(root, parse_cond(agent.filter.cond)), root) \
                    if root in model.dirs else []
                cat = c.nodes[node_id].catalog
                got = cat.dump_subtree(root) if cat.exists(root) else []
                dumps.append((f"{node_id}/{agent.sub_id}", expected, got))
        finally:
            for store in c.stores.values():
                store.close()
    return result, dumps


@criterion(1, "convergence suite")
def test_convergence_suite():
    assert len(SCENARIOS) >= 20
    t0 = time.perf_counter()
    compared = 0
    for path in SCENARIOS:
        result, dumps = run_with_model(path, seed=1)
        assert result.checks and result.passed, \
            f"{path.stem}: " + "; ".join(f"line {f.lineno} {f.text}: {f.detail}" for f in result.failures)
        for who, expected, got in dumps:
            assert got == expected, f"{path.stem}: {who} differs from the reference model"
            compared += 1
    elapsed = time.perf_counter() - t0
    print(f"\n{len(SCENARIOS)} scenarios, {compared} replica dumps checked, {elapsed:.1f} s")
    assert compared >= len(SCENARIOS)
    assert elapsed < 60


# -- 2 ----------------------------------------------------------------------------------
@criterion(2, "atomic log pairing under crashes")
def test_crash_injection(tmp_path):
    t0 = time.perf_counter()
    total = crashed = 0
    for seed in range(4):
        ops = make_workload(seed)
        states = reference_states(ops)
        for k, (plan, every) in enumerate(crash_points(ops, tmp_path / f"m{seed}", 260, random.Random(seed))):
            out = crash_once(ops, states, tmp_path / f"s{seed}_{k}", plan, every)
            assert out.recovered_to >= 0, \
                f"seed {seed} point {k} ({plan}, every {every}): state is neither acked nor acked+1"
            total += 1
            crashed += out.crashed
    elapsed = time.perf_counter() - t0
    print(f"\n{total} crash points, {crashed} crashed mid-run, 0 mismatches, {elapsed:.1f} s")
    assert total >= 1000 and crashed >= total // 2
    assert elapsed < 120


# -- 3 ----------------------------------------------------------------------------------
BENCH_ENTRIES = int(os.environ.get("METACAT_BENCH_ENTRIES", "10000"))
BENCH_RATE = float(os.environ.get("METACAT_BENCH_RATE", "90"))


@criterion(3, "benchmark linearity")
def test_benchmark_linearity():
    reports = sweep(range(11), BENCH_ENTRIES, BENCH_RATE)
    units = np.array([r.work_units for r in reports], dtype=float)
    xs = np.arange(11)
    slope, intercept = np.polyfit(xs, units, 1)
    resid = np.abs(units - (intercept + slope * xs)).max()
    print(f"\nslope {slope:.1f}/slave, max residual {resid:.2f} ({resid / slope:.2%} of slope)")
    assert resid < 0.10 * slope
    fit = fit_work_units(reports)
    assert fit.within(0.10) and fit.slope == pytest.approx(slope)
    # one log write per insert plus one shipment per insert per slave
    assert [r.work_units for r in reports] == [BENCH_ENTRIES * (1 + n) for n in range(11)]
    assert reports[0].pending_offline == BENCH_ENTRIES
    assert not reports[10].rate_unsustainable, f"capacity {reports[10].capacity:.0f}/s"
    assert all(len(r.lag_ms) == r.slave_count for r in reports)


# -- 4 and 5 ----------------------------------------------------------------------------
@criterion(4, "filter equivalence")
def test_filter_equivalence():
    t0 = time.perf_counter()
    for seed in range(100):
        check_pair(seed)
    assert time.perf_counter() - t0 < 30


@criterion(5, "gc safety and liveness")
def test_gc_safety_and_liveness():
    t0 = time.perf_counter()
    gcs = deleted = 0
    for seed in range(60):
        stats = gc_schedule(seed)
        gcs += stats["gcs"]
        deleted += stats["deleted"]
    print(f"\n60 schedules, {gcs} GC runs checked, {deleted} records collected")
    assert gcs > 300 and deleted > 0
    assert time.perf_counter() - t0 < 60


# -- 6 ----------------------------------------------------------------------------------
def lifecycle_cluster(tmp_path, **cfg):
    master = MasterConfig(gc_interval=0.5, expiry_interval=0.5, **cfg)
    c = SimCluster(3, latency=0.005, master_config=master,
                   slave_config=SlaveConfig(backoff_base=0.2, backoff_cap=1.0))
    c.add_node("M", str(tmp_path / "M"))
    c.add_node("S")
    c.add_replica("S", "s1", "M", "/l")
    c.client("M", "CREATEDIR /l n:INT")
    for i in range(30):
        c.client("M", f"ADDENTRY /l/e{i:03d} {i}")
    c.drain()
    return c


def insert(c, lo, hi):
    for i in range(lo, hi):
        c.client("M", f"ADDENTRY /l/e{i:03d} {i}")


def converged(c):
    return c.nodes["S"].catalog.dump_subtree("/l") == c.nodes["M"].catalog.dump_subtree("/l")


@criterion(6, "subscription lifecycle")
def test_subscription_survives_master_restart(tmp_path):
    c = lifecycle_cluster(tmp_path)
    before = c.nodes["M"].master.get_subscription("s1")
    c.crash("M")
    c.advance(2)
    c.restart("M")
    after = c.nodes["M"].master.get_subscription("s1")
    assert (after.filter, after.last_acked) == (before.filter, before.last_acked)
    insert(c, 30, 50)
    c.drain()
    agent = c.nodes["S"].agents["s1"]
    assert converged(c) and len(c.nodes["S"].catalog.find_entries("/l")) == 50
    assert agent.counters["bootstraps"] == 1 and agent.counters["rebootstraps"] == 0


@criterion(6, "subscription lifecycle")
def test_expiry_on_timeout_then_rebootstrap(tmp_path):
    timeout = 5.0
    c = lifecycle_cluster(tmp_path, expiry_timeout=timeout)
    c.partition("M", "S")
    insert(c, 30, 40)
    c.advance(0.5)
    sub = c.nodes["M"].master.get_subscription("s1")
    assert sub.state == "OFFLINE"
    # still there just short of the timeout
    c.advance(sub.offline_since + timeout - 0.2 - c.now())
    assert c.nodes["M"].master.get_subscription("s1").state == "OFFLINE"
    c.advance(1.5)
    assert c.nodes["M"].master.is_expired("s1")
    assert c.nodes["M"].master.log_records() == []
    c.heal()
    c.drain()
    assert converged(c) and c.nodes["S"].agents["s1"].counters["rebootstraps"] >= 1
    assert c.nodes["M"].master.get_subscription("s1").state == "CONNECTED"


@criterion(6, "subscription lifecycle")
def test_expiry_on_pending_threshold_then_rebootstrap(tmp_path):
    k = 20
    c = lifecycle_cluster(tmp_path, pending_threshold=k)
    c.partition("M", "S")
    insert(c, 30, 30 + k)
    c.advance(2)
    sub = c.nodes["M"].master.get_subscription("s1")
    assert sub.state == "OFFLINE" and sub.pending == k      # at the threshold, not past it
    insert(c, 30 + k, 31 + k)
    c.advance(1)
    assert c.nodes["M"].master.is_expired("s1")
    c.heal()
    c.drain()
    assert converged(c) and len(c.nodes["S"].catalog.find_entries("/l")) == 31 + k
    assert c.nodes["S"].agents["s1"].counters["rebootstraps"] >= 1


# -- 7 ----------------------------------------------------------------------------------
def read_only_cluster():
    c = SimCluster(5, latency=0.005)
    c.add_node("M")
    c.add_node("S")
    c.add_replica("S", "s1", "M", "/r")
    c.client("M", "CREATEDIR /r n:INT s:STRING")
    c.client("M", "CREATEDIR /r/sub n:INT")
    for i in range(50):
        c.client("M", f"ADDENTRY /r/e{i:02d} {i} v{i % 7}")
    c.drain()
    return c


READS = ["FIND /r", 'FIND /r "n > 25"', "DUMP /r", "GETATTR /r/e07", "FIND /r/sub"]
WRITES = ["ADDENTRY /r/new 1 x", "SETATTR /r/e03 n 99", "DELENTRY /r/e04", "ADDATTR /r x:FLOAT",
          "REMOVEATTR /r s", "CREATEDIR /r/other", "REMOVEDIR /r/sub"]


@criterion(7, "read availability")
@pytest.mark.parametrize("fault", ["partition", "crash"])
def test_reads_served_writes_redirected(fault):
    c = read_only_cluster()
    want = {line: c.client("M", line) for line in READS}
    if fault == "partition":
        c.partition("M", "S")
    else:
        c.crash("M")
    c.advance(1)
    assert c.nodes["S"].agents["s1"].mode == DISCONNECTED
    for k in range(100):
        line = READS[k % len(READS)]
        got = c.client("S", line)
        assert got.startswith("OK") and got == want[line], line
    for k in range(100):
        resp = decode_response(c.client("S", WRITES[k % len(WRITES)]))
        assert resp.code == 421 and c.addr("M") in resp.message


# -- 8 ----------------------------------------------------------------------------------
FED_READS = ["FIND /a", "FIND /b", 'FIND /a "n >= 10"', "DUMP /a", "DUMP /b", "GETATTR /a/a07", "GETATTR /b/b13"]


def federated(mode):
    c = SimCluster(8, latency=0.003)
    c.add_node("A")
    c.add_node("B")
    c.set_map(MastershipMap([RootAssignment("/a", "A", c.addr("A"), mode),
                             RootAssignment("/b", "B", c.addr("B"), mode)]))
    c.client("A", "CREATEDIR /a n:INT")
    c.client("B", "CREATEDIR /b n:INT s:STRING")
    for i in range(30):
        c.client("A", f"ADDENTRY /a/a{i:02d} {i}")
        c.client("B", f"ADDENTRY /b/b{i:02d} {i} t{i % 3}")
    c.client("A", "SETATTR /a/a05 n 77")
    c.client("B", "DELENTRY /b/b02")
    c.drain()
    return c


@criterion(8, "federation")
def test_federation_reads_agree_in_both_modes():
    seen = {}
    for mode in (PHYSICAL, VIRTUAL):
        c = federated(mode)
        for line in FED_READS:
            at_a, at_b = c.client("A", line), c.client("B", line)
            assert at_a == at_b and at_a.startswith("OK"), f"{mode}: {line}"
            seen.setdefault(line, set()).add(at_a)
        holds_copy = c.nodes["A"].catalog.exists("/b")
        assert holds_copy == (mode == PHYSICAL)
    assert all(len(v) == 1 for v in seen.values()), "modes disagree"


@criterion(8, "federation")
@pytest.mark.parametrize("name", ["federation_physical", "federation_virtual"])
def test_federation_scenarios(name):
    path = next(p for p in SCENARIOS if p.stem == name)
    result = run_scenario(Scenario.load(path), 1)
    assert result.passed, [f.detail for f in result.failures]


@criterion(8, "federation")
@pytest.mark.parametrize("roots", [("/a", "/a/b"), ("/", "/x"), ("/a", "/a"), ("/a/b/c", "/a")])
def test_overlapping_maps_rejected(roots):
    m = MastershipMap([RootAssignment(r, o, f"{o}:1", PHYSICAL) for r, o in zip(roots, "AB")])
    with pytest.raises(OverlappingRoots):
        validate_map(m)
    with pytest.raises(OverlappingRoots):
        Node("A").set_map(m)
    with pytest.raises(ScenarioMalformed):
        Scenario.parse(f"NODE A\nNODE B\nMAP {roots[0]} A PHYSICAL\nMAP {roots[1]} B VIRTUAL\n")
    validate_map(MastershipMap([RootAssignment("/a", "A", "A:1", PHYSICAL),
                                RootAssignment("/ab", "B", "B:1", PHYSICAL)]))


# -- 9 ----------------------------------------------------------------------------------
@criterion(9, "protocol golden files")
def test_golden_corpus_and_fuzz():
    t0 = time.perf_counter()
    exchanges = 0
    for path in GOLDEN:
        text = path.read_text()
        assert replay(text) == text, f"{path.name} is not byte-exact"
        exchanges += count_exchanges(text)
    assert exchanges >= 50
    rng = random.Random(9)
    for _ in range(10_000):
        req = random_request(rng)
        assert parse_request(req.line) == req
    assert time.perf_counter() - t0 < 10

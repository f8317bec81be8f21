"""Master scalability benchmark on the simulated cluster.

One master ingests ``entries`` inserts at ``rate`` per virtual second while
``slaves`` discard-mode replicas (they acknowledge without applying) drain
the log.  Master cost is counted in work units, one per command logged and
one per record shipped, so the result does not depend on the host machine.
With zero slaves a single subscriber is registered and then taken offline,
so the master still logs every insert and keeps it for later.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from .master import MasterConfig
from .slave import SlaveConfig
from .sim import SimCluster

CSV_HEADER = ["slaves", "entries", "rate", "lag_ms_p50", "lag_ms_max", "work_units", "wall_ms"]


class RateUnsustainable(RuntimeError):
    """The master could not keep up with the requested ingest rate."""


@dataclass
class BenchReport:
    slave_count: int
    entries: int
    rate: float
    lag_ms: list[float] = field(default_factory=list)
    logged: int = 0
    shipped: int = 0
    pending_offline: Optional[int] = None
    wall_ms: float = 0.0
    master_busy_ms: float = 0.0

    @property
    def work_units(self) -> int:
        return self.logged + self.shipped

    @property
    def lag_ms_p50(self) -> float:
        return statistics.median(self.lag_ms) if self.lag_ms else 0.0

    @property
    def lag_ms_max(self) -> float:
        return max(self.lag_ms, default=0.0)

    @property
    def capacity(self) -> float:
        """Inserts per second the master could absorb, judged by its busy time."""
        if not self.entries:
            return float("inf")
        return self.entries / max(self.master_busy_ms / 1000.0, 1e-9)

    @property
    def rate_unsustainable(self) -> bool:
        return self.capacity < self.rate

    def error(self) -> Optional[RateUnsustainable]:
        if self.rate_unsustainable:
            return RateUnsustainable(f"{self.slave_count} slaves: master capacity "
                                     f"{self.capacity:.0f}/s below target {self.rate:g}/s")
        return None

    def csv_row(self) -> list:
        return [self.slave_count, self.entries, f"{self.rate:g}", f"{self.lag_ms_p50:.1f}",
                f"{self.lag_ms_max:.1f}", self.work_units, f"{self.wall_ms:.0f}"]


def _timed(fn, acc: list):
    def wrapper(*a, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*a, **kw)
        finally:
            acc[0] += time.perf_counter() - t0
    return wrapper


def run_benchmark(slaves: int, entries: int, rate: float, *, seed: int = 0,
                  latency: float = 0.0, poll_interval: float = 0.1) -> BenchReport:
    if not 0 <= slaves:
        raise ValueError("slave count must be non-negative")
    if rate <= 0:
        raise ValueError("rate must be positive")
    wall0 = time.perf_counter()
    c = SimCluster(seed, latency=latency, trace_messages=False,
                   master_config=MasterConfig(poll_interval=poll_interval),
                   slave_config=SlaveConfig(discard=True))
    c.add_node("M")
    names = [f"S{i}" for i in range(1, slaves + 1)] or ["S0"]
    for name in names:
        c.add_node(name)
        c.add_replica(name, name, "M", "/bench")
    c.client("M", "CREATEDIR /bench n:INT name:STRING")
    c.drain()
    if slaves == 0:
        c.crash("S0")
        c.advance(poll_interval)

    master = c.nodes["M"]
    busy = [0.0]
    master.tick = _timed(master.tick, busy)
    master.master.acknowledge = _timed(master.master.acknowledge, busy)
    request = _timed(master.request, busy)
    base = dict(master.master.counters)
    t0 = c.now()
    for k in range(entries):
        c.sched.at(t0 + k / rate, lambda k=k: request(f"ADDENTRY /bench/e{k:06d} {k} item{k}"))
    c.advance(entries / rate + poll_interval)
    if slaves:
        c.drain()

    report = BenchReport(slaves, entries, rate)
    report.logged = master.master.counters["logged"] - base.get("logged", 0)
    report.shipped = master.master.counters["shipped"] - base.get("shipped", 0)
    if slaves == 0:
        report.pending_offline = master.master.get_subscription("S0").pending
    elif entries:
        history = c.history["M"]
        last = max(history)
        committed = history[last].ts
        for name in names:
            agent = c.nodes[name].agents[name]
            report.lag_ms.append((agent.applied_at[last] - committed) * 1000.0)
    else:
        report.lag_ms = [0.0] * slaves
    report.master_busy_ms = busy[0] * 1000.0
    report.wall_ms = (time.perf_counter() - wall0) * 1000.0
    return report


def sweep(slave_counts: Iterable[int], entries: int, rate: float, **kwargs) -> list[BenchReport]:
    return [run_benchmark(n, entries, rate, **kwargs) for n in slave_counts]


def write_csv(reports: Sequence[BenchReport], path: Union[str, Path, None] = None, stream=None) -> None:
    """Write the CSV table to ``path`` or to an open text ``stream``."""
    def emit(f):
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in reports:
            w.writerow(r.csv_row())

    if stream is not None:
        emit(stream)
    else:
        with open(path, "w", newline="") as f:
            emit(f)


@dataclass(frozen=True)
class LinearFit:
    intercept: float
    slope: float
    max_residual: float

    @property
    def relative_residual(self) -> float:
        return self.max_residual / abs(self.slope) if self.slope else float("inf")

    def within(self, fraction: float = 0.10) -> bool:
        return self.relative_residual < fraction


def fit_work_units(reports: Sequence[BenchReport]) -> LinearFit:
    """Least-squares line through (slave count, work units)."""
    xs = [r.slave_count for r in reports]
    ys = [r.work_units for r in reports]
    slope, intercept = statistics.linear_regression(xs, ys)
    resid = max(abs(y - (intercept + slope * x)) for x, y in zip(xs, ys))
    return LinearFit(intercept, slope, resid)


def format_table(reports: Sequence[BenchReport]) -> str:
    head = f"{'slaves':>6} {'entries':>7} {'rate':>6} {'lag p50':>9} {'lag max':>9} " \
           f"{'work':>8} {'capacity/s':>10} {'wall ms':>8}"
    lines = [head]
    for r in reports:
        cap = "inf" if r.capacity == float("inf") else f"{r.capacity:.0f}"
        lines.append(f"{r.slave_count:>6} {r.entries:>7} {r.rate:>6g} {r.lag_ms_p50:>9.1f} "
                     f"{r.lag_ms_max:>9.1f} {r.work_units:>8} {cap:>10} {r.wall_ms:>8.0f}")
    return "\n".join(lines)

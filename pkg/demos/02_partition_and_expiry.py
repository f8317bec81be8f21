"""What a replica does when it loses its master (virtual clock, no sockets).

1. The link is cut.  The replica keeps answering reads and refuses writes.
2. The master keeps the subscription OFFLINE and its pending log grows.
3. After the expiry timeout the master gives up and frees the log.
4. The link heals.  The replica finds its subscription gone and bootstraps again.
"""

from metacat.master import MasterConfig
from metacat.sim import SimCluster
from metacat.slave import SlaveConfig

c = SimCluster(seed=1, latency=0.01,
               master_config=MasterConfig(expiry_timeout=10.0, gc_interval=0.5, expiry_interval=0.5),
               slave_config=SlaveConfig(backoff_cap=2.0))
c.add_node("M")
c.add_node("S")
c.add_replica("S", "s1", "M", "/runs")
c.client("M", "CREATEDIR /runs energy:FLOAT")
for i in range(20):
    c.client("M", f"ADDENTRY /runs/r{i:03d} {i * 1.5}")
c.drain()


def status(label):
    m = c.nodes["M"].master
    subs = {s.sub_id: s for s in m.subscriptions()}
    sub = subs.get("s1")
    state = sub.state if sub else ("EXPIRED" if m.is_expired("s1") else "absent")
    pending = sub.pending if sub else "-"
    rows = len(c.nodes["S"].catalog.find_entries("/runs"))
    print(f"t={c.now():6.2f}  {label:<28} sub={state:<9} pending={pending!s:<4} "
          f"log={len(m.log_records()):<3} replica rows={rows}")


status("in sync")
c.partition("M", "S")
for i in range(20, 35):
    c.client("M", f"ADDENTRY /runs/r{i:03d} {i * 1.5}")
c.advance(1)
status("partitioned, 15 new writes")
print("  read on replica :", c.client("S", "FIND /runs").split("\n", 1)[0])
print("  write on replica:", c.client("S", "ADDENTRY /runs/x 1.0").split("\n", 1)[0])
c.advance(6)
status("still inside the timeout")
c.advance(6)
status("past the timeout")
c.heal()
c.drain()
status("healed and drained")
print("re-bootstraps on the replica:", c.nodes["S"].agents["s1"].counters["rebootstraps"])

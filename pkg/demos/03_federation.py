"""Two nodes share one namespace.  A masters /a and B masters /b.

In PHYSICAL mode each node keeps a replicated copy of the other's subtree.
In VIRTUAL mode it keeps nothing and forwards requests to the owner.
Either way a client sees the same answers at both nodes.
"""

from metacat.errors import CatalogError
from metacat.federation import PHYSICAL, VIRTUAL, MastershipMap, RootAssignment, validate_map
from metacat.sim import SimCluster

for mode in (PHYSICAL, VIRTUAL):
    c = SimCluster(seed=2, latency=0.005)
    c.add_node("A")
    c.add_node("B")
    c.set_map(MastershipMap([RootAssignment("/a", "A", c.addr("A"), mode),
                             RootAssignment("/b", "B", c.addr("B"), mode)]))
    c.client("A", "CREATEDIR /a n:INT")
    c.client("B", "CREATEDIR /b n:INT")
    for i in range(3):
        c.client("A", f"ADDENTRY /a/x{i} {i}")
        c.client("B", f"ADDENTRY /b/y{i} {10 + i}")
    c.drain()
    print(f"== {mode}")
    for line in ("FIND /a", "FIND /b"):
        at_a = c.client("A", line).split("\n")[:-2]
        at_b = c.client("B", line).split("\n")[:-2]
        print(f"  {line:<8} at A: {at_a}\n  {'':<8} at B: {at_b}  same={at_a == at_b}")
    print(f"  A holds a local copy of /b: {c.nodes['A'].catalog.exists('/b')}")

print("\nOwnership must not overlap:")
try:
    validate_map(MastershipMap([RootAssignment("/a", "A", "A:1", PHYSICAL),
                                RootAssignment("/a/deep", "B", "B:1", PHYSICAL)]))
except CatalogError as exc:
    print(f"  rejected: ERR {exc.code} {exc.message}")

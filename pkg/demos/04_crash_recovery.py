"""The file store pulls the plug halfway through a write, then recovers.

Every catalog change and its replication log record share one transaction,
so after recovery either both exist or neither does.
"""

import tempfile

from metacat.catalog import Catalog
from metacat.master import Filter, ReplicationMaster
from metacat.storage import CrashPlan, FileStore, SimulatedCrash
from metacat.wire import parse_request

with tempfile.TemporaryDirectory() as d:
    store = FileStore(d, fsync=False, crash=CrashPlan(after_bytes=1500))
    cat = Catalog(store)
    master = ReplicationMaster(cat)
    master.subscribe("s1", Filter("/"))
    done = 0
    try:
        cat.execute(parse_request("CREATEDIR /logs n:INT"))
        for i in range(100):
            cat.execute(parse_request(f"ADDENTRY /logs/e{i} {i}"))
            done += 1
    except SimulatedCrash:
        print(f"crashed after {done} acknowledged inserts (journal cut at 1500 bytes)")
    store.close()

    store = FileStore(d, fsync=False)
    cat = Catalog(store)
    master = ReplicationMaster(cat)
    entries = cat.find_entries("/logs")
    logged = [r for r in master.log_records() if r.verb == "ADDENTRY"]
    print(f"recovered: {len(entries)} entries, {len(logged)} ADDENTRY log records")
    print("every entry has its log record:", len(entries) == len(logged))
    print("nothing acknowledged was lost:", len(entries) in (done, done + 1))
    cat.check_invariants()
    store.close()

"""A master and a filtered replica talking over real sockets.

The master owns /photos.  The replica only wants entries rated 4 or more.
It bootstraps from a snapshot, then follows the log as the master changes.
"""

import time

from metacat.master import Filter, MasterConfig
from metacat.node import Node
from metacat.slave import STREAMING, SlaveConfig
from metacat.tcp import NodeServer, request

master = Node("M", master_config=MasterConfig(poll_interval=0.02))
replica = Node("S", slave_config=SlaveConfig(ack_interval=0.05, backoff_base=0.05))

with NodeServer(master, tick_interval=0.01) as m_srv, NodeServer(replica, tick_interval=0.01) as s_srv:
    print(f"master at {m_srv.address}, replica at {s_srv.address}\n")

    def say(addr, line):
        resp = request(addr, line)
        head = "OK" if resp.ok else f"ERR {resp.code} {resp.message}"
        print(f"  {addr} <- {line}\n     -> {head} {resp.rows if resp.rows else ''}")
        return resp

    print("The master gets a schema and a few photos:")
    say(m_srv.address, "CREATEDIR /photos rating:INT place:STRING")
    for name, rating, place in [("beach", 5, "Nice"), ("dog", 3, "Home"), ("peak", 4, "Alps")]:
        say(m_srv.address, f'ADDENTRY /photos/{name} {rating} "{place}"')

    print("\nThe replica subscribes to /photos with the condition rating >= 4.")
    replica.add_replica("good", Filter("/photos", "rating >= 4"), m_srv.address)

    def wait():
        agent = replica.agents["good"]
        for _ in range(200):
            if agent.mode == STREAMING and agent.next_seq > master.store.log_high:
                return
            time.sleep(0.02)

    wait()
    say(s_srv.address, "FIND /photos")

    print("\nThe dog photo gets re-rated.  It now passes the filter, so it arrives as a new entry:")
    say(m_srv.address, "SETATTR /photos/dog rating 5")
    say(m_srv.address, "SETATTR /photos/peak rating 1")
    wait()
    say(s_srv.address, "FIND /photos")

    print("\nReplicas are read-only.  A write is refused with the master's address:")
    say(s_srv.address, "ADDENTRY /photos/cat 4 Home")

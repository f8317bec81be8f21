"""metacat: a hierarchical metadata catalog with asynchronous replication.

Directories are schemas holding typed attributes; entries carry one value
per attribute.  A master logs every mutation in the same transaction as the
mutation itself and ships the log to subscribed slaves, which bootstrap from
a consistent snapshot.  Subscriptions can cover a subtree and narrow it
with a condition.  Nodes federate by owning disjoint subtrees.

Layers, bottom up::

    storage      transactional MVCC store, in memory or journaled on disk
    catalog      the data model and every metadata command
    wire         the line protocol codec
    master       replication log, subscriptions, snapshots, shipping, GC
    slave        the replica agent
    federation   mastership maps and routing
    node         all of the above behind one request/replication endpoint
    sim          deterministic virtual-time cluster
    scenario     scripted multi-node tests on the simulator
    bench        master scalability benchmark
    tcp          real sockets
"""

from .bench import BenchReport, RateUnsustainable, fit_work_units, run_benchmark
from .catalog import AttributeDef, Catalog
from .errors import CatalogError
from .federation import PHYSICAL, VIRTUAL, MastershipMap, RootAssignment, validate_map
from .master import Filter, LogRecord, MasterConfig, ReplicationMaster, Subscription
from .node import Node
from .scenario import AssertionFailed, Scenario, ScenarioMalformed, run_scenario
from .sim import SimCluster
from .slave import ReplicaAgent, SlaveConfig
from .storage import FileStore, Store, open_store
from .wire import Request, Response, decode_response, encode_request, encode_response, parse_request

__version__ = "0.1.0"

__all__ = [
    "AssertionFailed", "AttributeDef", "BenchReport", "Catalog", "CatalogError", "FileStore",
    "Filter", "LogRecord", "MasterConfig", "MastershipMap", "Node", "PHYSICAL", "RateUnsustainable",
    "ReplicaAgent", "ReplicationMaster", "Request", "Response", "RootAssignment", "Scenario",
    "ScenarioMalformed", "SimCluster", "SlaveConfig", "Store", "Subscription", "VIRTUAL",
    "decode_response", "encode_request", "encode_response", "fit_work_units", "open_store",
    "parse_request", "run_benchmark", "run_scenario", "validate_map",
]

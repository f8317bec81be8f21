"""INI configuration for ``serve``.

Example::

    [node]
    id = A
    listen = 127.0.0.1:7000
    storage = /var/lib/metacat/A      # or "memory"
    map = /etc/metacat/map.txt        # optional federation map
    snapshot_chunk = 500

    [master]
    poll_interval = 0.1
    expiry_timeout = 86400
    pending_threshold = 100000

    [slave]
    ack_every = 64
    ack_interval = 0.5

    [replica s1]
    master = 127.0.0.1:7001
    root = /a
    cond = n > 3
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

from .federation import MastershipMap
from .master import Filter, MasterConfig
from .node import Node
from .slave import SlaveConfig
from .storage import open_store


@dataclass
class NodeConfig:
    node_id: str
    listen: str = "127.0.0.1:7000"
    storage: str = "memory"
    map_path: Optional[str] = None
    snapshot_chunk: int = 0
    master: MasterConfig = field(default_factory=MasterConfig)
    slave: SlaveConfig = field(default_factory=SlaveConfig)
    replicas: list[tuple[str, Filter, str]] = field(default_factory=list)


def _section(parser, name: str, cls):
    if not parser.has_section(name):
        return cls()
    kwargs = {}
    for f in fields(cls):
        if parser.has_option(name, f.name):
            raw = parser.get(name, f.name)
            kwargs[f.name] = parser.getboolean(name, f.name) if f.type in (bool, "bool") else \
                type(getattr(cls(), f.name))(raw)
    return cls(**kwargs)


def parse_config(text: str) -> NodeConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read_string(text)
    if not parser.has_section("node") or not parser.has_option("node", "id"):
        raise ValueError("config needs a [node] section with an id")
    node = parser["node"]
    cfg = NodeConfig(
        node_id=node["id"],
        listen=node.get("listen", "127.0.0.1:7000"),
        storage=node.get("storage", "memory"),
        map_path=node.get("map"),
        snapshot_chunk=node.getint("snapshot_chunk", 0),
        master=_section(parser, "master", MasterConfig),
        slave=_section(parser, "slave", SlaveConfig),
    )
    for name in parser.sections():
        if name.startswith("replica "):
            sec = parser[name]
            sub_id = name.split(None, 1)[1].strip()
            cfg.replicas.append((sub_id, Filter(sec["root"], sec.get("cond")), sec["master"]))
    return cfg


def load_config(path: Union[str, Path]) -> NodeConfig:
    return parse_config(Path(path).read_text())


def build_node(cfg: NodeConfig) -> Node:
    fed_map = MastershipMap.load(cfg.map_path) if cfg.map_path else None
    return Node(cfg.node_id, open_store(cfg.storage), addr=cfg.listen,
                master_config=cfg.master, slave_config=cfg.slave,
                subscriptions=cfg.replicas, fed_map=fed_map,
                snapshot_chunk=cfg.snapshot_chunk)

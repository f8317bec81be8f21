"""Command line front end: ``python -m metacat <command>``.

Failures exit non-zero and print one ``error <code> <message>`` line on
stderr.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path
from typing import Optional, Sequence

from .bench import fit_work_units, format_table, sweep, write_csv
from .catalog import Catalog
from .config import build_node, load_config
from .errors import CatalogError
from .scenario import Scenario, ScenarioMalformed, run_scenario
from .storage import open_store
from .wire import decode_response, encode_response

EXIT_FAIL, EXIT_USAGE = 1, 2


def _fail(code, message: str) -> int:
    print(f"error {code} {message}", file=sys.stderr)
    return EXIT_FAIL


def parse_range(text: str) -> list[int]:
    """``3``, ``0..4`` (inclusive) or ``1,2,5``."""
    out: list[int] = []
    for part in text.split(","):
        if ".." in part:
            lo, hi = part.split("..", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def _print_response(text: str, out) -> bool:
    resp = decode_response(text)
    out.write("OK\n" if resp.ok else f"ERR {resp.code} {resp.message}\n")
    for row in resp.rows:
        out.write(row + "\n")
    out.flush()
    return resp.ok


# -- subcommands -------------------------------------------------------------------
def cmd_serve(args) -> int:
    from .tcp import NodeServer, split_addr

    cfg = load_config(args.config)
    if args.listen:
        cfg.listen = args.listen
    node = build_node(cfg)
    host, port = split_addr(cfg.listen)
    server = NodeServer(node, host, port).start()
    print(f"serving {cfg.node_id} on {server.address}", flush=True)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait()
    server.stop()
    node.store.close()
    return 0


def cmd_client(args) -> int:
    if args.connect:
        from .tcp import Client

        try:
            client = Client(args.connect)
        except OSError as exc:
            return _fail(503, f"cannot connect to {args.connect}: {exc}")

        def send(line: str) -> str:
            return encode_response(client.send(line))
    else:
        from .node import Node

        node = Node("local", open_store(args.store))
        send = node.request
    lines = args.command or (ln.rstrip("\n") for ln in sys.stdin)
    ok = True
    for line in lines:
        if not line.strip():
            continue
        try:
            ok &= _print_response(send(line), sys.stdout)
        except (OSError, ConnectionError) as exc:
            return _fail(503, str(exc))
        if line.strip().upper() == "QUIT":
            break
    return 0 if ok else EXIT_FAIL


def cmd_bench(args) -> int:
    counts = parse_range(args.slaves)
    if any(n < 0 for n in counts):
        return _fail(400, "slave counts must be non-negative")
    reports = sweep(counts, args.entries, args.rate, seed=args.seed)
    print(format_table(reports))
    if len(reports) > 1:
        fit = fit_work_units(reports)
        print(f"work units ~ {fit.intercept:.0f} + {fit.slope:.0f} * N, "
              f"max residual {fit.relative_residual:.1%} of slope")
    if args.csv:
        write_csv(reports, args.csv)
    for r in reports:
        err = r.error()
        if err is not None:
            print(f"warning: {err}", file=sys.stderr)
    return 0


def cmd_sim(args) -> int:
    try:
        scenario = Scenario.load(args.file)
    except ScenarioMalformed as exc:
        return _fail(400, f"scenario malformed: {exc}")
    except OSError as exc:
        return _fail(404, str(exc))
    result = run_scenario(scenario, args.seed)
    text = result.trace_text()
    if args.trace:
        Path(args.trace).write_text(text)
    else:
        sys.stdout.write(text)
    for c in result.failures:
        print(f"error assertion line {c.lineno}: {c.text}\n{c.detail}", file=sys.stderr)
    return 0 if result.passed else EXIT_FAIL


def cmd_dump(args) -> int:
    if args.connect:
        from .tcp import request

        resp = request(args.connect, f"DUMP {args.path}")
        if not resp.ok:
            return _fail(resp.code, resp.message)
        commands = resp.rows
    else:
        store = open_store(args.store)
        try:
            commands = Catalog(store).dump_subtree(args.path)
        finally:
            store.close()
    text = "".join(c + "\n" for c in commands)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_restore(args) -> int:
    commands = [ln for ln in Path(args.file).read_text().splitlines() if ln.strip()]
    if args.connect:
        from .tcp import Client

        with Client(args.connect) as client:
            for line in commands:
                resp = client.send(line)
                if not resp.ok:
                    return _fail(resp.code, f"{resp.message} ({line})")
        return 0
    store = open_store(args.store)
    try:
        n = Catalog(store).restore(commands)
    finally:
        store.close()
    print(f"restored {n} commands")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metacat", description="Replicated metadata catalog.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run a node from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--listen", help="override the listen address")
    s.set_defaults(fn=cmd_serve)

    s = sub.add_parser("client", help="line REPL speaking the wire protocol")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--connect", metavar="HOST:PORT")
    g.add_argument("--store", default="memory", help="local store directory (default: in memory)")
    s.add_argument("-c", "--command", action="append", help="send this line instead of reading stdin")
    s.set_defaults(fn=cmd_client)

    s = sub.add_parser("bench", help="master scalability benchmark")
    s.add_argument("--slaves", default="0..10", help="count, range a..b or list")
    s.add_argument("--entries", type=int, default=10_000)
    s.add_argument("--rate", type=float, default=90.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--csv", help="write the results table as CSV")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("sim", help="run a scenario file on the simulated cluster")
    s.add_argument("file")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trace", help="write the event trace here instead of stdout")
    s.set_defaults(fn=cmd_sim)

    s = sub.add_parser("dump", help="write a subtree snapshot file")
    s.add_argument("path", nargs="?", default="/")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--store")
    g.add_argument("--connect", metavar="HOST:PORT")
    s.add_argument("-o", "--out")
    s.set_defaults(fn=cmd_dump)

    s = sub.add_parser("restore", help="replay a snapshot file")
    s.add_argument("file")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--store")
    g.add_argument("--connect", metavar="HOST:PORT")
    s.set_defaults(fn=cmd_restore)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except CatalogError as exc:
        return _fail(exc.code, exc.message)
    except (OSError, ValueError) as exc:
        return _fail(500, str(exc))


cli_main = main

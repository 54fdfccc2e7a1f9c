"""Command-line interface: ``cyclewatch <command> [options]``.

Commands: simulate, broker, run, analyze, stats, export, ingest.
Exit codes: 0 ok, 2 config, 3 network, 4 storage, 5 corruption.
``CYCLEWATCH_ROOT`` sets the default data directory.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from .analytics import AnalyticsConfig
from .columnstore import ColumnStore
from .config import RunConfig, build_config, default_root, load_config, parse_config_text
from .errors import ConfigInvalid, UnknownFormat, exit_code_for
from .eventlog import EventLog
from .model import ParameterCatalog
from .mqttwire import Broker, MqttClient
from .pipeline import BrokerThread, LogBridge, analyze_store, run_pipeline
from .simulator import StreamStats, default_cells, stream_payloads, stream_publish, write_labels

log = logging.getLogger("cyclewatch")


def _kv(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigInvalid(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _analytics_config(args) -> AnalyticsConfig:
    values: dict[str, object] = {}
    if getattr(args, "config", None):
        values.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
    values.update(_kv(args.set))
    return build_config(values).analytics


def _install_stop() -> threading.Event:
    stop = threading.Event()

    def handler(signum, frame):
        log.info("signal %d: shutting down", signum)
        stop.set()

    signal.signal(signal.SIGINT, handler)
    signal.signal(signal.SIGTERM, handler)
    return stop


def _out(path: str | None):
    return open(path, "wb") if path and path != "-" else contextlib.nullcontext(sys.stdout.buffer)


def _print_json(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


# --- commands -----------------------------------------------------------------------


def cmd_run(args) -> int:
    overrides = {
        "root": args.root, "broker": args.broker, "store": args.store, "log_root": args.log_root,
        "reports": args.reports, "cells": args.cells, "seed": args.seed, "anomaly_rate": args.anomaly_rate,
        "duration_s": args.duration, "realtime": True if args.realtime else None,
    }
    overrides.update(_kv(args.set))
    cfg = load_config(args.config, overrides)
    stop = _install_stop()
    res = run_pipeline(cfg, stop, on_ready=lambda port: log.info("broker listening on port %d", port))
    _print_json(res.manifest["counts"] | {"exit_code": res.exit_code, "manifest": str(cfg.manifest)})
    return res.exit_code


def cmd_simulate(args) -> int:
    cells = default_cells(args.cells, args.seed, args.anomaly_rate)
    stats = StreamStats()
    stop = _install_stop()
    if args.broker:
        host, port = RunConfig(root=args.root, broker=args.broker).broker_address
        with MqttClient("cyclewatch-sim", host, port) as client:
            stream_publish(cells, args.duration, client.publish, args.realtime, stop=stop.is_set, stats=stats)
            client.wait_for_acks(timeout=30.0)
    else:
        with _out(args.out) as fh:
            for _, payload in stream_payloads(cells, args.duration, stats, stop=stop.is_set):
                fh.write(payload + b"\n")
    if args.labels:
        write_labels(stats.labels, args.labels)
    summary = stats.to_json()
    summary["values_per_second"] = stats.values / max(stats.seconds, 1)
    sys.stderr.write(json.dumps(summary, sort_keys=True) + "\n")
    return 0


def cmd_broker(args) -> int:
    host, port = RunConfig(root=args.root, broker=args.broker).broker_address
    elog = EventLog(args.log_root) if args.log_root else None
    bridge = LogBridge(elog, f"{args.topics_root}/#") if elog else None
    bt = BrokerThread(Broker(bridge), host, port)
    stop = _install_stop()
    port = bt.start()
    sys.stderr.write(f"broker listening on {host}:{port}\n")
    try:
        stop.wait()
    finally:
        bt.stop()
        if elog:
            elog.close()
    return 0


def cmd_analyze(args) -> int:
    cfg = _analytics_config(args)
    store = args.store or str(default_root() / "store.ccf")
    with _out(args.out) as fh:
        analyze_store(Path(store), cfg, fh)
    return 0


def cmd_stats(args) -> int:
    store = args.store or str(default_root() / "store.ccf")
    with ColumnStore.open(store, readonly=True) as st:
        rep = st.compression_stats(fleet_cells=args.fleet_cells)
        out = rep.to_json()
        out.update({"cells": len(st.cells()), "cycles": st.n_cycles})
    _print_json(out)
    return 0


def _range(text: str | None) -> tuple[int, int] | None:
    if not text:
        return None
    lo, sep, hi = text.partition(":")
    try:
        return (int(lo), int(hi)) if sep else (int(lo), int(lo))
    except ValueError:
        raise ConfigInvalid(f"--cycles expects LO:HI, got {text!r}") from None


def cmd_export(args) -> int:
    if args.format not in ("ndjson", "csv"):
        raise UnknownFormat(f"unknown export format {args.format!r}")
    store = args.store or str(default_root() / "store.ccf")
    with ColumnStore.open(store, readonly=True) as st, _out(args.out) as fh:
        st.export(fh, args.format, args.cell, _range(args.cycles))
    return 0


def cmd_ingest(args) -> int:
    store = args.store or str(default_root() / "store.ccf")
    with ColumnStore.open_or_create(store, ParameterCatalog.demo()) as st:
        src = contextlib.nullcontext(sys.stdin.buffer) if args.input == "-" else open(args.input, "rb")
        with src:
            n = st.ingest_ndjson(src)
    _print_json({"cycles_ingested": n})
    return 0


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cyclewatch", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common_sim(sp):
        sp.add_argument("--cells", type=int, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--anomaly-rate", type=float, default=None)
        sp.add_argument("--duration", type=int, default=None, help="simulated seconds")
        sp.add_argument("--realtime", action="store_true", help="pace publishing at 1 s per tick")
        sp.add_argument("--broker", default=None, help="host:port")

    sp = sub.add_parser("run", help="full pipeline: simulator, broker, log, store, detectors")
    common_sim(sp)
    sp.add_argument("--config", help="key = value config file")
    sp.add_argument("--root", default=None)
    sp.add_argument("--store")
    sp.add_argument("--log-root")
    sp.add_argument("--reports")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("simulate", help="publish simulated telemetry to a broker or a file")
    common_sim(sp)
    sp.add_argument("--root", default=str(default_root()))
    sp.add_argument("--out", help="write payload NDJSON here when no --broker is given (default stdout)")
    sp.add_argument("--labels", help="write anomaly labels NDJSON here")
    sp.set_defaults(func=cmd_simulate, cells=10, seed=0, anomaly_rate=0.05, duration=60)

    sp = sub.add_parser("broker", help="run a standalone MQTT broker")
    sp.add_argument("--broker", default="127.0.0.1:1883", help="host:port to listen on")
    sp.add_argument("--root", default=str(default_root()))
    sp.add_argument("--log-root", help="also append flatform/# payloads to this event log")
    sp.add_argument("--topics-root", default="flatform")
    sp.set_defaults(func=cmd_broker)

    sp = sub.add_parser("analyze", help="run the detectors offline over a store")
    sp.add_argument("--store")
    sp.add_argument("--out", help="reports NDJSON path (default stdout)")
    sp.add_argument("--config")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("stats", help="compression statistics of a store")
    sp.add_argument("--store")
    sp.add_argument("--fleet-cells", type=int, default=80)
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("export", help="export stored cycles as NDJSON or CSV")
    sp.add_argument("--store")
    sp.add_argument("--format", default="ndjson")
    sp.add_argument("--cell")
    sp.add_argument("--cycles", help="inclusive LO:HI")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("ingest", help="load baseline NDJSON into a store")
    sp.add_argument("input", help="NDJSON file or -")
    sp.add_argument("--store")
    sp.set_defaults(func=cmd_ingest)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except BrokenPipeError:
        # downstream reader went away (e.g. piped into head)
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        sys.stderr.write(f"cyclewatch {args.command}: {type(exc).__name__}: {exc}\n")
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())

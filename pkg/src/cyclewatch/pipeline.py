"""End-to-end ingest: simulator -> MQTT broker -> event log -> column store + detectors.

Stages talk only through the broker, the event log and bounded queues:

* the broker's sink is a bridge that appends every ``<root>/#`` payload to
  log topic ``raw`` and syncs it before any PUBACK leaves;
* the ``store`` consumer group assembles cycles and commits row groups;
* the ``analytics`` consumer group assembles cycles independently and
  appends AnomalyReports to an NDJSON file.

Restart semantics. The store writer commits, as its offset, the earliest log
position still needed by any open cycle, and on restart drops samples older
than each cell's last stored cycle. The analytics group rebuilds detector
state by replaying the log from its start (detectors are pure folds) and
skips reports already present in the reports file.
"""

from __future__ import annotations

import asyncio
import errno
import json
import logging
import os
import platform
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .analytics import AnomalyReport, CellDetector, analyze_frames, reports_ndjson
from .columnstore import ColumnStore
from .config import RunConfig
from .errors import PortInUse, exit_code_for
from .eventlog import EventLog, TopicLog
from .model import CycleAssembler, CycleFrame, ParameterCatalog, decode_payload
from .mqttwire import Broker, BrokerServer, MqttClient
from .mqttwire.topics import topic_matches
from .simulator import StreamStats, default_cells, stream_publish, write_labels

log = logging.getLogger(__name__)

RAW_TOPIC = "raw"
STORE_GROUP = "store"
ANALYTICS_GROUP = "analytics"
READ_BATCH = 4096
CHECKPOINT_S = 2.0


# --- raw log records ---------------------------------------------------------------


def encode_raw(topic: str, payload: bytes) -> bytes:
    return topic.encode("utf-8") + b"\0" + payload


def decode_raw(record: bytes) -> tuple[str, bytes]:
    topic, sep, payload = record.partition(b"\0")
    if not sep:
        raise ValueError("raw record lacks a topic separator")
    return topic.decode("utf-8"), payload


class LogBridge:
    """Broker sink: append matching publishes to the ``raw`` log topic."""

    def __init__(self, elog: EventLog, topic_filter: str = "flatform/#"):
        self.elog = elog
        self.filter = topic_filter
        self.topic = elog.topic(RAW_TOPIC)
        self.appended = 0
        self.ignored = 0

    def deliver(self, topic: str, payload: bytes) -> None:
        if topic_matches(self.filter, topic):
            self.topic.append(encode_raw(topic, payload))
            self.appended += 1
        else:
            self.ignored += 1

    def sync(self) -> None:
        self.topic.sync()


# --- broker thread -------------------------------------------------------------------


class BrokerThread:
    """Run a BrokerServer on its own asyncio loop in a daemon thread."""

    def __init__(self, broker: Broker, host: str = "127.0.0.1", port: int = 0):
        self.broker = broker
        self.host = host
        self.port = port
        self.server: BrokerServer | None = None
        self._loop: asyncio.AbstractEventLoop | None = None
        self._stopped: asyncio.Event | None = None
        self._ready = threading.Event()
        self._error: BaseException | None = None
        self._thread = threading.Thread(target=self._main, daemon=True, name="broker")

    def start(self) -> int:
        self._thread.start()
        self._ready.wait()
        if self._error is not None:
            raise self._error
        return self.port

    def _main(self) -> None:
        async def serve():
            self._loop = asyncio.get_running_loop()
            self._stopped = asyncio.Event()
            self.server = BrokerServer(self.broker, self.host, self.port)
            try:
                self.port = await self.server.start()
            except OSError as exc:
                self._error = PortInUse(f"cannot bind {self.host}:{self.port}: {exc}") \
                    if exc.errno in (errno.EADDRINUSE, errno.EACCES) else exc
                self._ready.set()
                return
            self._ready.set()
            await self._stopped.wait()
            await self.server.stop()

        asyncio.run(serve())

    def stop(self, timeout: float = 5.0) -> None:
        if self._loop is not None and self._stopped is not None and self._thread.is_alive():
            self._loop.call_soon_threadsafe(self._stopped.set)
        self._thread.join(timeout)


# --- cycle assembly from the raw log --------------------------------------------


class LogAssembly:
    """Per-cell cycle assembly over raw log records.

    Duplicates are dropped by their (cell, device, ts) key; records of a
    cell older than ``skip_before_ms[cell]`` are ignored (already processed
    before a restart).
    """

    def __init__(self, catalog: ParameterCatalog, first_index: dict[str, int] | None = None,
                 skip_before_ms: dict[str, int] | None = None):
        self.catalog = catalog
        self.first_index = dict(first_index or {})
        self.skip_before_ms = dict(skip_before_ms or {})
        self.assemblers: dict[str, CycleAssembler] = {}
        self.last_ts: dict[tuple[str, str], int] = {}
        self.sec_offset: dict[str, dict[int, int]] = defaultdict(dict)
        self.pins: dict[str, int] = {}  # cell -> oldest second a downstream buffer still needs
        self.duplicates = 0
        self.skipped = 0
        self.unknown = 0
        self.records = 0

    def _assembler(self, cell: str) -> CycleAssembler:
        asm = self.assemblers.get(cell)
        if asm is None:
            asm = self.assemblers[cell] = CycleAssembler(
                self.catalog.ids, cell_id=cell, first_cycle_index=self.first_index.get(cell, 0))
        return asm

    def feed(self, offset: int, record: bytes) -> list[CycleFrame]:
        self.records += 1
        _, payload = decode_raw(record)
        samples, unknown = decode_payload(payload, self.catalog)
        self.unknown += len(unknown)
        if not samples:
            return []
        s0 = samples[0]
        cell, ts = s0.cell_id, s0.ts_ms
        key = (cell, s0.device_class.value)
        if ts <= self.last_ts.get(key, -1):
            self.duplicates += 1
            return []
        self.last_ts[key] = ts
        if ts < self.skip_before_ms.get(cell, -1):
            self.skipped += 1
            return []
        self.sec_offset[cell].setdefault(ts // 1000, offset)
        return self._assembler(cell).push_many(samples)

    def pin(self, cell: str, second: int) -> None:
        """Keep the log offsets of ``second`` onward until ``unpin``."""
        self.pins.setdefault(cell, second)

    def unpin(self, cell: str) -> None:
        self.pins.pop(cell, None)

    def resume_offset(self, next_offset: int) -> int:
        """Earliest log offset still needed to rebuild every open or pinned cycle.

        Seconds before that point are forgotten.
        """
        need = next_offset
        for cell, asm in self.assemblers.items():
            starts = [s for s in (asm.earliest_open_second, self.pins.get(cell)) if s is not None]
            secs = self.sec_offset[cell]
            if not starts:
                secs.clear()
                continue
            start = min(starts)
            for sec in [s for s in secs if s < start]:
                del secs[sec]
            if secs:
                need = min(need, min(secs.values()))
        return need


# --- consumers ---------------------------------------------------------------------------


class _Consumer(threading.Thread):
    group = ""

    def __init__(self, elog: EventLog, catalog: ParameterCatalog, producer_done: threading.Event,
                 abort: threading.Event):
        super().__init__(daemon=True, name=f"consumer-{self.group}")
        self.elog = elog
        self.raw: TopicLog = elog.topic(RAW_TOPIC)
        self.catalog = catalog
        self.producer_done = producer_done
        self.abort = abort
        self.error: BaseException | None = None
        self.offset = 0
        self.assembly = LogAssembly(catalog)

    def run(self) -> None:
        try:
            self.offset = self.prepare()
            last_cp = time.monotonic()
            while not self.abort.is_set():
                limit = self.raw.synced_offset
                if self.offset < limit:
                    n = min(READ_BATCH, limit - self.offset)
                    for rec in self.raw.read(self.offset, n):
                        for f in self.assembly.feed(rec.offset, rec.payload):
                            self.on_frame(f)
                        self.offset = rec.offset + 1
                elif self.producer_done.is_set() and self.offset >= self.raw.end_offset:
                    break
                else:
                    time.sleep(0.005)
                if time.monotonic() - last_cp >= CHECKPOINT_S:
                    self.checkpoint()
                    last_cp = time.monotonic()
            self.checkpoint(final=True)
        except BaseException as exc:  # surfaced by the run loop
            log.exception("%s consumer failed", self.group)
            self.error = exc
            self.abort.set()

    def prepare(self) -> int:
        return self.elog.fetch_committed(self.group, RAW_TOPIC)

    def on_frame(self, f: CycleFrame) -> None:
        raise NotImplementedError

    def checkpoint(self, final: bool = False) -> None:
        self.elog.commit_offset(self.group, RAW_TOPIC, self.assembly.resume_offset(self.offset))


class StoreWriter(_Consumer):
    group = STORE_GROUP

    def __init__(self, elog, catalog, producer_done, abort, store: ColumnStore,
                 group_cycles: int = 64, flush_s: float = 900.0):
        super().__init__(elog, catalog, producer_done, abort)
        self.store = store
        self.group_cycles = group_cycles
        self.flush_s = flush_s
        # frames wait here, pinned in the log, until a row group is worth writing
        self.pending: dict[str, list[CycleFrame]] = {}
        self.pending_since: dict[str, float] = {}
        self.frames_written = 0

    def prepare(self) -> int:
        first, skip = {}, {}
        for cell in self.store.cells():
            last = self.store.last_cycle(cell)
            (f,) = self.store.scan(cell, (last, last), params=[])
            first[cell] = last + 1
            skip[cell] = f.end_ts_ms
        self.assembly = LogAssembly(self.catalog, first, skip)
        return super().prepare()

    def on_frame(self, f: CycleFrame) -> None:
        cell = f.cell_id
        buf = self.pending.get(cell)
        if buf and f.cycle_index != buf[-1].cycle_index + 1:
            self._flush_cell(cell)
        if cell not in self.pending:
            self.pending[cell] = []
            self.pending_since[cell] = time.monotonic()
            self.assembly.pin(cell, f.start_ts_ms // 1000)
        self.pending[cell].append(f)
        if len(self.pending[cell]) >= self.group_cycles:
            self._flush_cell(cell)

    def _flush_cell(self, cell: str) -> None:
        buf = self.pending.pop(cell, [])
        self.pending_since.pop(cell, None)
        self.assembly.unpin(cell)
        if buf:
            self.store.write_rowgroup(buf)
            self.frames_written += len(buf)

    def checkpoint(self, final: bool = False) -> None:
        now = time.monotonic()
        for cell in sorted(self.pending):
            if final or now - self.pending_since[cell] >= self.flush_s:
                self._flush_cell(cell)
        super().checkpoint(final)


class ReportSink:
    """Append-only reports NDJSON that survives a crash mid-line."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.existing: set[tuple[str, int, str]] = set()
        if self.path.exists():
            data = self.path.read_bytes()
            cut = data.rfind(b"\n") + 1
            if cut != len(data):
                with open(self.path, "r+b") as fh:
                    fh.truncate(cut)
            for line in data[:cut].splitlines():
                d = json.loads(line)
                self.existing.add((d["cell"], d["cycle"], d["detector"]))
        self.fh = open(self.path, "ab")
        self.written = 0

    def write(self, reports: list[AnomalyReport]) -> None:
        fresh = [r for r in reports
                 if (r.cell_id, r.cycle_index, r.detector.value) not in self.existing]
        if fresh:
            self.fh.write(b"".join(r.to_json().encode() + b"\n" for r in fresh))
            self.written += len(fresh)

    def sync(self) -> None:
        self.fh.flush()
        os.fsync(self.fh.fileno())

    def close(self) -> None:
        self.sync()
        self.fh.close()

    def normalize(self) -> int:
        """Rewrite the file sorted by (cell, cycle, detector), duplicates removed."""
        lines = self.path.read_bytes().splitlines()
        reports = {}
        for line in lines:
            r = AnomalyReport.from_json(line.decode())
            reports.setdefault(r.sort_key, r)
        data = reports_ndjson(reports.values())
        tmp = self.path.with_name(self.path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.path)
        return len(reports)


class AnalyticsWorker(_Consumer):
    group = ANALYTICS_GROUP

    def __init__(self, elog, catalog, producer_done, abort, cfg, sink: ReportSink):
        super().__init__(elog, catalog, producer_done, abort)
        self.cfg = cfg
        self.sink = sink
        self.detectors: dict[str, CellDetector] = {}
        self.frames_seen = 0
        self.flagged = 0

    def prepare(self) -> int:
        super().prepare()
        # replay from the log start; suppressed reports are already on disk
        return self.raw.start_offset

    def on_frame(self, f: CycleFrame) -> None:
        det = self.detectors.get(f.cell_id)
        if det is None:
            det = self.detectors[f.cell_id] = CellDetector(f.cell_id, self.cfg)
        reports = det.step(f)
        self.frames_seen += 1
        self.flagged += sum(r.flagged for r in reports)
        self.sink.write(reports)

    def checkpoint(self, final: bool = False) -> None:
        self.sink.sync()
        super().checkpoint(final)


# --- run ---------------------------------------------------------------------------------


@dataclass
class RunResult:
    exit_code: int
    manifest: dict = field(default_factory=dict)


def publisher_resume_second(raw: TopicLog, epoch_ms: int, per_second: int) -> int:
    """First simulated second that may be missing from the log tail."""
    end = raw.end_offset
    if end == 0:
        return 0
    tail = raw.read(max(raw.start_offset, end - 2 * per_second), 2 * per_second)
    last = max(json.loads(decode_raw(r.payload)[1])["ts"] for r in tail)
    return max(0, (last - epoch_ms) // 1000)


def run_pipeline(cfg: RunConfig, stop: threading.Event | None = None,
                 on_ready: Callable[[int], None] | None = None) -> RunResult:
    """Run simulator, broker, bridge and both consumer groups to completion."""
    stop = stop or threading.Event()
    t_start = time.time()
    t0 = time.perf_counter()
    cfg.root.mkdir(parents=True, exist_ok=True)
    catalog = ParameterCatalog.demo()
    cells = default_cells(cfg.cells, cfg.seed, cfg.anomaly_rate, catalog)
    host, port = cfg.broker_address

    elog = EventLog(cfg.log_root, segment_bytes=cfg.segment_bytes, retention_bytes=cfg.retention_bytes)
    store = ColumnStore.open_or_create(cfg.store, catalog)
    bridge = LogBridge(elog, f"{cfg.topics_root}/#")
    broker = BrokerThread(Broker(bridge), host, port)
    producer_done = threading.Event()
    abort = threading.Event()
    sink = ReportSink(cfg.reports)
    writer = StoreWriter(elog, catalog, producer_done, abort, store, cfg.store_group_cycles, cfg.store_flush_s)
    analytics = AnalyticsWorker(elog, catalog, producer_done, abort, cfg.analytics, sink)
    stats = StreamStats()
    client = None
    exit_code = 0
    error: BaseException | None = None
    try:
        port = broker.start()
        if on_ready is not None:
            on_ready(port)
        writer.start()
        analytics.start()
        per_second = sum(len(c.catalog.devices()) for c in cells)
        resume = publisher_resume_second(elog.topic(RAW_TOPIC), cells[0].epoch_start_ms, per_second)
        client = MqttClient("cyclewatch-sim", host, port)
        client.connect()
        stream_publish(cells, cfg.duration_s, client.publish, cfg.realtime, start_s=resume,
                       stop=lambda: stop.is_set() or abort.is_set(), stats=stats)
        client.wait_for_acks(timeout=30.0)
        client.disconnect()
    except BaseException as exc:
        error = exc
        abort.set()
    finally:
        elog.sync(RAW_TOPIC)
        producer_done.set()
        if stop.is_set():
            abort.set()
        for t in (writer, analytics):
            if t.is_alive() or t.ident is not None:
                t.join()
        broker.stop()
    error = error or writer.error or analytics.error
    sink.close()
    n_reports = sink.normalize() if error is None else None
    if error is None:
        write_labels(stats.labels, cfg.labels)
    if error is not None:
        exit_code = exit_code_for(error)
        log.error("run failed: %s", error)

    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "versions": {"cyclewatch": __version__, "python": platform.python_version(), "numpy": np.__version__},
        "counts": {
            "publishes": stats.publishes,
            "values": stats.values,
            "seconds_published": stats.seconds,
            "acked": client.acked if client else 0,
            "bridge_appends": bridge.appended,
            "raw_records": elog.end_offset(RAW_TOPIC),
            "duplicates_dropped": writer.assembly.duplicates,
            "frames_stored": store.n_cycles,
            "frames_analyzed": analytics.frames_seen,
            "reports": n_reports,
            "flagged": analytics.flagged,
            "labels": len(stats.labels),
        },
        "exit_code": exit_code,
        "interrupted": stop.is_set(),
        "wall": {"started_at": t_start, "elapsed_s": round(time.perf_counter() - t0, 3)},
    }
    store.close()
    elog.close()
    _write_json(cfg.manifest, manifest)
    if error is not None and not isinstance(error, Exception):
        raise error  # KeyboardInterrupt and friends
    return RunResult(exit_code, manifest)


def _write_json(path: Path, obj: dict) -> None:
    tmp = Path(path).with_name(Path(path).name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def analyze_store(store_path: Path, cfg, out=None) -> bytes:
    """Offline pass over a store; returns the same NDJSON a run would write."""
    with ColumnStore.open(store_path, readonly=True) as store:
        data = reports_ndjson(analyze_frames(store.scan(), cfg))
    if out is not None:
        out.write(data)
    return data

"""Segmented append-only commit log with CRC-framed records and consumer offsets.

On-disk layout::

    <root>/<topic>/<base_offset>.seg     record frames, one file per segment
    <root>/_offsets/<group>/<topic>      committed offset: u64 LE + crc32 LE

A record frame is ``[len u32 LE][crc32 u32 LE][payload]``; the CRC (IEEE
polynomial, ``zlib.crc32``) covers the payload only.  Record offsets are
implicit: a segment's first record has offset ``base_offset`` and every
following record adds one.

Durability is batched.  :meth:`EventLog.append` returns once the record is
written to the OS; an fsync follows when 512 records are pending or the
oldest pending record is 10 ms old.  Callers that must not acknowledge
before the data is on disk (the MQTT bridge) call :meth:`EventLog.sync`.
"""

from __future__ import annotations

import bisect
import errno
import fcntl
import logging
import os
import re
import struct
import threading
import time
import zlib
from array import array
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    CorruptRecord,
    OffsetOutOfRange,
    PayloadTooLarge,
    StorageError,
    StorageFull,
    UnrecoverableSegment,
    WriterLocked,
)

log = logging.getLogger(__name__)

HEADER = struct.Struct("<II")
MAX_PAYLOAD = 1 << 20
DEFAULT_SEGMENT_BYTES = 64 << 20
SYNC_RECORDS = 512
SYNC_INTERVAL_S = 0.010
OFFSETS_DIR = "_offsets"
_TOPIC_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


@dataclass(frozen=True)
class LogRecord:
    offset: int
    crc32: int
    payload: bytes


@dataclass(frozen=True)
class SegmentMeta:
    base_offset: int
    size: int
    sealed: bool


def encode_record(payload: bytes) -> bytes:
    return HEADER.pack(len(payload), zlib.crc32(payload)) + payload


def scan_frames(data: bytes) -> tuple[list[int], int, str | None]:
    """Walk record frames in ``data``.

    Returns ``(positions, good_end, problem)``: start positions of all valid
    records, the byte offset just past the last valid record, and a reason
    string if the walk stopped before the end of ``data``.
    """
    positions: list[int] = []
    pos = 0
    n = len(data)
    while pos < n:
        if pos + HEADER.size > n:
            return positions, pos, "partial header"
        length, crc = HEADER.unpack_from(data, pos)
        end = pos + HEADER.size + length
        if length > MAX_PAYLOAD or end > n:
            return positions, pos, "partial payload"
        if zlib.crc32(data[pos + HEADER.size:end]) != crc:
            return positions, pos, "crc mismatch"
        positions.append(pos)
        pos = end
    return positions, pos, None


def _fsync_dir(path: Path) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


class _Segment:
    def __init__(self, base_offset: int, path: Path, positions: array, size: int):
        self.base_offset = base_offset
        self.path = path
        self.positions = positions
        self.size = size
        self._rfd: int | None = None

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def next_offset(self) -> int:
        return self.base_offset + len(self.positions)

    def read_fd(self) -> int:
        if self._rfd is None:
            self._rfd = os.open(self.path, os.O_RDONLY)
        return self._rfd

    def close(self) -> None:
        if self._rfd is not None:
            os.close(self._rfd)
            self._rfd = None


class TopicLog:
    """One topic: a directory of segments with a single writer."""

    def __init__(self, root: Path, name: str, segment_bytes: int = DEFAULT_SEGMENT_BYTES,
                 retention_bytes: int | None = None, readonly: bool = False,
                 sync_records: int = SYNC_RECORDS, sync_interval_s: float = SYNC_INTERVAL_S):
        if not _TOPIC_RE.match(name):
            raise ValueError(f"invalid topic name {name!r}")
        self.name = name
        self.dir = Path(root) / name
        self.segment_bytes = segment_bytes
        self.retention_bytes = retention_bytes
        self.readonly = readonly
        self.sync_records = sync_records
        self.sync_interval_s = sync_interval_s
        self._lock = threading.RLock()
        self._segments: list[_Segment] = []
        self._wfd: int | None = None
        self._lockfd: int | None = None
        self._pending = 0
        self._pending_since = 0.0
        self.synced_offset = 0
        if not readonly:
            self.dir.mkdir(parents=True, exist_ok=True)
            self._acquire_writer_lock()
        self.end_offset = self.recover()

    def _acquire_writer_lock(self) -> None:
        fd = os.open(self.dir / ".writer.lock", os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            os.close(fd)
            raise WriterLocked(f"topic {self.name!r} already has a writer") from None
        self._lockfd = fd

    # --- recovery -------------------------------------------------------------

    def _segment_files(self) -> list[tuple[int, Path]]:
        if not self.dir.exists():
            return []
        found = []
        for p in self.dir.iterdir():
            if p.suffix == ".seg" and p.stem.isdigit():
                found.append((int(p.stem), p))
        return sorted(found)

    def recover(self) -> int:
        """Scan segments, truncate a torn tail of the last one, return the next offset.

        A sealed (non-last) segment that fails verification is not repaired:
        :class:`UnrecoverableSegment` is raised for operator action.
        """
        with self._lock:
            for seg in self._segments:
                seg.close()
            self._segments = []
            files = self._segment_files()
            for i, (base, path) in enumerate(files):
                data = path.read_bytes()
                positions, good_end, problem = scan_frames(data)
                last = i == len(files) - 1
                if problem and not last:
                    raise UnrecoverableSegment(f"{path}: {problem} at byte {good_end} in sealed segment")
                if self._segments and self._segments[-1].next_offset != base:
                    raise UnrecoverableSegment(
                        f"{path}: expected base offset {self._segments[-1].next_offset}, found {base}")
                if problem:
                    if self.readonly:
                        log.warning("%s: ignoring torn tail at byte %d (%s)", path, good_end, problem)
                    else:
                        log.warning("%s: truncating torn tail at byte %d (%s)", path, good_end, problem)
                        with open(path, "r+b") as fh:
                            fh.truncate(good_end)
                            fh.flush()
                            os.fsync(fh.fileno())
                self._segments.append(_Segment(base, path, array("Q", positions), good_end))
            if not self._segments and not self.readonly:
                self._segments.append(self._create_segment(0))
            end = self._segments[-1].next_offset if self._segments else 0
            self.synced_offset = end
            if not self.readonly:
                self._open_writer()
            return end

    def _create_segment(self, base: int) -> _Segment:
        path = self.dir / f"{base}.seg"
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o644)
        os.close(fd)
        _fsync_dir(self.dir)
        return _Segment(base, path, array("Q"), 0)

    def _open_writer(self) -> None:
        if self._wfd is not None:
            os.close(self._wfd)
        self._wfd = os.open(self._segments[-1].path, os.O_WRONLY | os.O_APPEND)

    # --- writing --------------------------------------------------------------

    def append(self, payload: bytes) -> int:
        if self.readonly:
            raise StorageError("topic opened read-only")
        if len(payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
        frame = encode_record(payload)
        with self._lock:
            seg = self._segments[-1]
            if seg.size >= self.segment_bytes:
                seg = self._roll()
            try:
                written = 0
                while written < len(frame):
                    written += os.write(self._wfd, frame[written:])
            except OSError as exc:
                os.ftruncate(self._wfd, seg.size)
                if exc.errno in (errno.ENOSPC, errno.EDQUOT):
                    raise StorageFull(str(exc)) from exc
                raise StorageError(str(exc)) from exc
            offset = seg.next_offset
            seg.positions.append(seg.size)
            seg.size += len(frame)
            self.end_offset = offset + 1
            if self._pending == 0:
                self._pending_since = time.monotonic()
            self._pending += 1
            if self._pending >= self.sync_records or time.monotonic() - self._pending_since >= self.sync_interval_s:
                self._sync_locked()
            return offset

    def sync(self) -> None:
        with self._lock:
            if self._pending:
                self._sync_locked()

    def sync_if_due(self) -> None:
        with self._lock:
            if self._pending and time.monotonic() - self._pending_since >= self.sync_interval_s:
                self._sync_locked()

    def _sync_locked(self) -> None:
        os.fsync(self._wfd)
        self._pending = 0
        self.synced_offset = self.end_offset

    def _roll(self) -> _Segment:
        self._sync_locked()
        new = self._create_segment(self.end_offset)
        self._segments.append(new)
        self._open_writer()
        self._enforce_retention()
        return new

    def _enforce_retention(self) -> None:
        if self.retention_bytes is None:
            return
        total = sum(s.size for s in self._segments)
        while len(self._segments) > 1 and total > self.retention_bytes:
            victim = self._segments.pop(0)
            total -= victim.size
            victim.close()
            victim.path.unlink()
            log.info("retention removed segment %s", victim.path.name)

    # --- reading --------------------------------------------------------------

    @property
    def start_offset(self) -> int:
        return self._segments[0].base_offset if self._segments else 0

    def segments(self) -> list[SegmentMeta]:
        with self._lock:
            return [SegmentMeta(s.base_offset, s.size, i < len(self._segments) - 1)
                    for i, s in enumerate(self._segments)]

    def read(self, from_offset: int, max_records: int = 1000) -> list[LogRecord]:
        with self._lock:
            end = self.end_offset
            if from_offset < self.start_offset:
                raise OffsetOutOfRange(f"{self.name}: offset {from_offset} before earliest {self.start_offset}")
            if from_offset > end:
                raise OffsetOutOfRange(f"{self.name}: offset {from_offset} beyond end {end}")
            if from_offset == end or max_records <= 0:
                return []
            bases = [s.base_offset for s in self._segments]
            i = bisect.bisect_right(bases, from_offset) - 1
            plan = []
            want = max_records
            off = from_offset
            while want > 0 and i < len(self._segments):
                seg = self._segments[i]
                k0 = off - seg.base_offset
                k1 = min(seg.count, k0 + want)
                if k1 > k0:
                    start = seg.positions[k0]
                    stop = seg.positions[k1] if k1 < seg.count else seg.size
                    plan.append((seg, off, start, stop, k1 - k0))
                    want -= k1 - k0
                    off += k1 - k0
                i += 1
        out: list[LogRecord] = []
        for seg, first, start, stop, count in plan:
            data = os.pread(seg.read_fd(), stop - start, start)
            pos = 0
            for j in range(count):
                if pos + HEADER.size > len(data):
                    raise CorruptRecord(self.name, first + j, "short read")
                length, crc = HEADER.unpack_from(data, pos)
                payload = data[pos + HEADER.size:pos + HEADER.size + length]
                if len(payload) != length or zlib.crc32(payload) != crc:
                    raise CorruptRecord(self.name, first + j)
                out.append(LogRecord(first + j, crc, payload))
                pos += HEADER.size + length
        return out

    def close(self) -> None:
        with self._lock:
            if self._wfd is not None:
                if self._pending:
                    self._sync_locked()
                os.close(self._wfd)
                self._wfd = None
            for seg in self._segments:
                seg.close()
            if self._lockfd is not None:
                os.close(self._lockfd)
                self._lockfd = None


class EventLog:
    """All topics under one root directory, plus consumer-group offsets."""

    def __init__(self, root: str | Path, segment_bytes: int = DEFAULT_SEGMENT_BYTES,
                 retention_bytes: int | None = None, readonly: bool = False,
                 sync_records: int = SYNC_RECORDS, sync_interval_s: float = SYNC_INTERVAL_S,
                 background_sync: bool = True):
        self.root = Path(root)
        self.segment_bytes = segment_bytes
        self.retention_bytes = retention_bytes
        self.readonly = readonly
        self.sync_records = sync_records
        self.sync_interval_s = sync_interval_s
        if not readonly:
            self.root.mkdir(parents=True, exist_ok=True)
        self._topics: dict[str, TopicLog] = {}
        self._lock = threading.Lock()
        self._group_locks: dict[str, threading.Lock] = {}
        self._stop = threading.Event()
        self._syncer: threading.Thread | None = None
        if background_sync and not readonly:
            self._syncer = threading.Thread(target=self._sync_loop, daemon=True, name="eventlog-sync")
            self._syncer.start()

    def _sync_loop(self) -> None:
        while not self._stop.wait(self.sync_interval_s / 2):
            for t in list(self._topics.values()):
                try:
                    t.sync_if_due()
                except (OSError, TypeError):
                    pass

    def topic(self, name: str) -> TopicLog:
        with self._lock:
            t = self._topics.get(name)
            if t is None:
                t = TopicLog(self.root, name, self.segment_bytes, self.retention_bytes, self.readonly,
                             self.sync_records, self.sync_interval_s)
                self._topics[name] = t
            return t

    def append(self, topic: str, payload: bytes) -> int:
        return self.topic(topic).append(payload)

    def read(self, topic: str, from_offset: int, max_records: int = 1000) -> list[LogRecord]:
        return self.topic(topic).read(from_offset, max_records)

    def end_offset(self, topic: str) -> int:
        return self.topic(topic).end_offset

    def sync(self, topic: str | None = None) -> None:
        topics = [self.topic(topic)] if topic else list(self._topics.values())
        for t in topics:
            t.sync()

    def recover(self, topic: str) -> int:
        return self.topic(topic).recover()

    # --- consumer groups ------------------------------------------------------

    def _offset_path(self, group: str, topic: str) -> Path:
        if not _TOPIC_RE.match(group):
            raise ValueError(f"invalid group name {group!r}")
        return self.root / OFFSETS_DIR / group / topic

    def commit_offset(self, group: str, topic: str, offset: int) -> int:
        """Durably record ``offset`` as the next record ``group`` will process.

        Commits are monotone: an offset below the current one is ignored
        with a warning.  Returns the offset now in effect.
        """
        lock = self._group_locks.setdefault(group, threading.Lock())
        with lock:
            current = self.fetch_committed(group, topic)
            if offset < current:
                log.warning("group %s topic %s: ignoring commit regression %d -> %d", group, topic, current, offset)
                return current
            if offset == current and self._offset_path(group, topic).exists():
                return current
            path = self._offset_path(group, topic)
            path.parent.mkdir(parents=True, exist_ok=True)
            raw = struct.pack("<Q", offset)
            tmp = path.with_name(path.name + ".tmp")
            with open(tmp, "wb") as fh:
                fh.write(raw + struct.pack("<I", zlib.crc32(raw)))
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
            _fsync_dir(path.parent)
            return offset

    def fetch_committed(self, group: str, topic: str) -> int:
        path = self._offset_path(group, topic)
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            return 0
        if len(raw) != 12 or zlib.crc32(raw[:8]) != struct.unpack("<I", raw[8:])[0]:
            raise CorruptRecord(f"{OFFSETS_DIR}/{group}", 0, f"bad offset file for topic {topic}")
        return struct.unpack("<Q", raw[:8])[0]

    def close(self) -> None:
        self._stop.set()
        if self._syncer is not None:
            self._syncer.join(timeout=1.0)
        with self._lock:
            for t in self._topics.values():
                t.close()
            self._topics.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

"""Single-file columnar store for cycle frames ("CCF1").

File layout, all integers little-endian::

    "CCF1"
    row group*      header, chunks, crc32 over header+chunks
    footer          compact JSON: schema and group index
    u32 crc32(footer)
    u32 len(footer)
    "CCF1"

A row group holds up to 256 consecutive cycles of one cell.  Its chunks are
one column per catalog parameter (all ticks of all cycles, concatenated),
the tick timestamp column, and one value per cycle for each scalar column.

Every commit writes a new file: the existing data region is copied to a
temporary file, the new groups and a new footer are appended, and the temp
file is fsynced and renamed over the store.  The rename is the only commit
point, so a crash leaves either the old or the new store, never a mixture.

The JSON baseline used for compression ratios is the NDJSON export: the
MQTT device payload of every (cycle, tick, device) plus ``cycle_index``.
"""

from __future__ import annotations

import csv
import fcntl
import io
import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    CorruptChunk,
    CorruptStore,
    EmptyStore,
    NonFiniteValue,
    SchemaMismatch,
    StorageError,
    UnknownFormat,
    UnknownParam,
    WriterLocked,
)
from .model import (
    ENERGY_PARAM,
    MASS_PARAM,
    CycleFrame,
    DeviceClass,
    DType,
    ParameterCatalog,
    ParameterSpec,
    encode_json,
    payload_dict,
    payload_value,
)

log = logging.getLogger(__name__)

MAGIC = b"CCF1"
GROUP_MAGIC = b"RGRP"
MAX_GROUP_CYCLES = 256
FIXED_POINT_EXP = 6
SECONDS_PER_YEAR = 365.25 * 86400

ENCODINGS = ("raw", "delta_varint", "rle", "dict")
CODECS = ("none", "deflate")

TS_COLUMN = "_ts"
SCALAR_COLUMNS = ("_cycle_index", "_T", "_start_ts", "_end_ts", "_energy_kwh", "_part_mass_g", "_stale")

_CHUNK_HEAD = struct.Struct("<BBIddII")
_GROUP_HEAD = struct.Struct("<4sIIIH")
_TAIL = struct.Struct("<II4s")


# --- varints -------------------------------------------------------------------


def _zigzag(d: np.ndarray) -> np.ndarray:
    d = d.astype(np.int64)
    return ((d << 1) ^ (d >> 63)).view(np.uint64)


def _unzigzag(u: np.ndarray) -> np.ndarray:
    u = u.astype(np.uint64)
    return ((u >> np.uint64(1)).view(np.int64)) ^ -((u & np.uint64(1)).view(np.int64))


def varint_encode(u: np.ndarray) -> bytes:
    """LEB128 encoding of an array of unsigned 64-bit integers."""
    u = np.asarray(u, dtype=np.uint64)
    if u.size == 0:
        return b""
    nbytes = np.ones(u.size, dtype=np.int64)
    rest = u >> np.uint64(7)
    while rest.any():
        nbytes += rest > 0
        rest >>= np.uint64(7)
    starts = np.cumsum(nbytes) - nbytes
    out = np.empty(int(nbytes.sum()), dtype=np.uint8)
    for k in range(int(nbytes.max())):
        sel = nbytes > k
        byte = (u[sel] >> np.uint64(7 * k)) & np.uint64(0x7F)
        more = (nbytes[sel] > k + 1).astype(np.uint64) << np.uint64(7)
        out[starts[sel] + k] = (byte | more).astype(np.uint8)
    return out.tobytes()


def varint_decode(buf: bytes, count: int) -> tuple[np.ndarray, int]:
    """Decode ``count`` varints from the start of ``buf``; returns ``(values, bytes_used)``."""
    if count == 0:
        return np.empty(0, dtype=np.uint64), 0
    b = np.frombuffer(buf, dtype=np.uint8)
    ends = np.flatnonzero(b < 0x80)
    if ends.size < count:
        raise CorruptChunk("varint stream ends early")
    ends = ends[:count]
    used = int(ends[-1]) + 1
    starts = np.empty(count, dtype=np.int64)
    starts[0] = 0
    starts[1:] = ends[:-1] + 1
    lengths = ends - starts + 1
    if lengths.max() > 10:
        raise CorruptChunk("varint longer than 10 bytes")
    b = b[:used]
    pos = np.arange(used) - np.repeat(starts, lengths)
    parts = (b & 0x7F).astype(np.uint64) << (7 * pos).astype(np.uint64)
    return np.add.reduceat(parts, starts), used


# --- column chunks ---------------------------------------------------------------


@dataclass(frozen=True)
class ColumnChunk:
    param_id: str
    encoding: str
    codec: str
    value_count: int
    min: float
    max: float
    data: bytes

    @property
    def compressed_bytes(self) -> int:
        return len(self.data)

    def to_bytes(self) -> bytes:
        head = _CHUNK_HEAD.pack(ENCODINGS.index(self.encoding), CODECS.index(self.codec), self.value_count,
                                self.min, self.max, len(self.data), zlib.crc32(self.data))
        return head + self.data

    @classmethod
    def from_bytes(cls, param_id: str, buf: bytes) -> "ColumnChunk":
        if len(buf) < _CHUNK_HEAD.size:
            raise CorruptChunk(f"{param_id}: chunk header truncated")
        enc, codec, count, lo, hi, n, crc = _CHUNK_HEAD.unpack_from(buf)
        data = buf[_CHUNK_HEAD.size:_CHUNK_HEAD.size + n]
        if len(data) != n or zlib.crc32(data) != crc:
            raise CorruptChunk(f"{param_id}: chunk body damaged")
        if enc >= len(ENCODINGS) or codec >= len(CODECS):
            raise CorruptChunk(f"{param_id}: unknown encoding or codec")
        return cls(param_id, ENCODINGS[enc], CODECS[codec], count, lo, hi, data)


def _bits(v: np.ndarray) -> np.ndarray:
    # compare floats by bit pattern so -0.0 and 0.0 stay distinct
    return v.view(np.uint64)


def _quantize(v: np.ndarray, exp: int) -> np.ndarray | None:
    scale = 10.0 ** exp
    scaled = v * scale
    if np.abs(scaled).max() >= 2.0 ** 53:
        return None
    q = np.rint(scaled).astype(np.int64)
    if not np.array_equal(_bits(q / scale), _bits(v)):
        return None
    return q


def _enc_raw(v: np.ndarray) -> bytes:
    return v.astype("<f8").tobytes()


def _enc_rle(v: np.ndarray) -> bytes:
    bits = _bits(v)
    starts = np.flatnonzero(np.concatenate(([True], bits[1:] != bits[:-1])))
    runs = np.diff(np.append(starts, v.size)).astype(np.uint64)
    return (struct.pack("<I", starts.size) + v[starts].astype("<f8").tobytes() + varint_encode(runs))


def _enc_dict(v: np.ndarray) -> bytes | None:
    table, idx = np.unique(_bits(v), return_inverse=True)
    if table.size > 255:
        return None
    return bytes([table.size]) + table.view(np.float64).astype("<f8").tobytes() + idx.astype(np.uint8).tobytes()


def _enc_delta(v: np.ndarray) -> bytes | None:
    exp = 0 if np.array_equal(v, np.rint(v)) else FIXED_POINT_EXP
    q = _quantize(v, exp)
    if q is None:
        return None
    d = np.diff(q)
    g = int(np.gcd.reduce(np.abs(d))) if d.size else 1
    g = max(g, 1)
    head = bytes([exp]) + varint_encode(np.array([g], dtype=np.uint64)) + varint_encode(_zigzag(q[:1]))
    return head + varint_encode(_zigzag(d // g))


def _pair_equal_fraction(v: np.ndarray) -> float:
    if v.size < 2:
        return 1.0
    bits = _bits(v)
    return float(np.count_nonzero(bits[1:] == bits[:-1])) / (v.size - 1)


def encode_column(values: Sequence[float] | np.ndarray, hint: str | None = None, param_id: str = "",
                  deflate: bool = True) -> ColumnChunk:
    """Encode one column.

    Without a hint: ``rle`` when at least 90% of neighbouring pairs are
    equal, ``dict`` when there are at most 255 distinct values, otherwise
    ``delta_varint`` over a fixed-point quantization (integers at scale 1,
    everything else at 1e-6).  Quantization must round-trip bit-exactly,
    else the column is stored ``raw``.  A deflate pass is kept only when it
    makes the chunk smaller.
    """
    v = np.ascontiguousarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("encode_column needs a non-empty 1-D column")
    if not np.isfinite(v).all():
        raise NonFiniteValue(f"{param_id or 'column'} has non-finite values")
    if hint is not None and hint not in ENCODINGS:
        raise ValueError(f"unknown encoding {hint!r}")

    body = None
    enc = hint
    if enc is None:
        if _pair_equal_fraction(v) >= 0.9:
            enc = "rle"
        elif np.unique(_bits(v)).size <= 255:
            enc = "dict"
        else:
            enc = "delta_varint"
    if enc == "rle":
        body = _enc_rle(v)
    elif enc == "dict":
        body = _enc_dict(v)
    elif enc == "delta_varint":
        body = _enc_delta(v)
    if body is None:
        enc, body = "raw", _enc_raw(v)
    elif enc == "raw":
        body = _enc_raw(v)

    codec = "none"
    if deflate:
        packed = zlib.compress(body, 6)
        if len(packed) < len(body):
            codec, body = "deflate", packed
    return ColumnChunk(param_id, enc, codec, int(v.size), float(v.min()), float(v.max()), body)


def decode_column(chunk: ColumnChunk) -> np.ndarray:
    body = chunk.data
    if chunk.codec == "deflate":
        try:
            body = zlib.decompress(body)
        except zlib.error as exc:
            raise CorruptChunk(f"{chunk.param_id}: {exc}") from None
    n = chunk.value_count
    try:
        if chunk.encoding == "raw":
            if len(body) != 8 * n:
                raise CorruptChunk(f"{chunk.param_id}: raw chunk has {len(body)} bytes for {n} values")
            out = np.frombuffer(body, dtype="<f8").astype(np.float64)
        elif chunk.encoding == "rle":
            (runs,) = struct.unpack_from("<I", body)
            vals = np.frombuffer(body, dtype="<f8", count=runs, offset=4)
            lengths, used = varint_decode(body[4 + 8 * runs:], runs)
            if 4 + 8 * runs + used != len(body) or int(lengths.sum()) != n:
                raise CorruptChunk(f"{chunk.param_id}: rle runs do not cover {n} values")
            out = np.repeat(vals, lengths.astype(np.int64))
        elif chunk.encoding == "dict":
            k = body[0]
            table = np.frombuffer(body, dtype="<f8", count=k, offset=1)
            idx = np.frombuffer(body, dtype=np.uint8, offset=1 + 8 * k)
            if idx.size != n or (idx.size and idx.max() >= k):
                raise CorruptChunk(f"{chunk.param_id}: dict indices inconsistent")
            out = table[idx]
        elif chunk.encoding == "delta_varint":
            exp = body[0]
            (g, q0), used = varint_decode(body[1:], 2)
            d, used2 = varint_decode(body[1 + used:], n - 1)
            if 1 + used + used2 != len(body):
                raise CorruptChunk(f"{chunk.param_id}: trailing bytes in delta stream")
            q = np.empty(n, dtype=np.int64)
            q[0] = _unzigzag(np.array([q0]))[0]
            q[1:] = _unzigzag(d) * np.int64(g)
            q = np.cumsum(q)
            out = q / (10.0 ** exp)
        else:
            raise CorruptChunk(f"unknown encoding {chunk.encoding!r}")
    except (struct.error, IndexError, ValueError) as exc:
        raise CorruptChunk(f"{chunk.param_id}: {exc}") from None
    if out.size != n:
        raise CorruptChunk(f"{chunk.param_id}: decoded {out.size} values, expected {n}")
    return np.ascontiguousarray(out, dtype=np.float64)


# --- schema and JSON baseline --------------------------------------------------


@dataclass(frozen=True)
class ColumnSpec:
    canonical_id: str
    source_name: str
    device_class: str
    dtype: str

    @classmethod
    def from_param(cls, p: ParameterSpec) -> "ColumnSpec":
        return cls(p.canonical_id, p.source_name, p.device_class.value, p.dtype.value)

    def as_param(self) -> ParameterSpec:
        lo, hi = (0.0, 1.0) if self.dtype == "bool" else (-1.0, 1.0)
        return ParameterSpec(self.canonical_id, self.source_name, DeviceClass(self.device_class), "",
                             DType(self.dtype), lo, hi)


class JsonLayout:
    """Serializer for the NDJSON baseline: one device payload per tick plus ``cycle_index``."""

    def __init__(self, schema: Sequence[ColumnSpec]):
        self.schema = tuple(schema)
        self.params = tuple(c.canonical_id for c in self.schema)
        groups: dict[str, list[int]] = {}
        for i, c in enumerate(self.schema):
            groups.setdefault(c.device_class, []).append(i)
        self.devices = [(dev, rows, [self.schema[r].as_param() for r in rows]) for dev, rows in groups.items()]

    def lines(self, f: CycleFrame) -> Iterator[bytes]:
        ts = f.tick_timestamps()
        cols = f.ticks.T.tolist()
        for t in range(f.T):
            col = cols[t]
            for dev, rows, specs in self.devices:
                obj = payload_dict(f.cell_id, dev, int(ts[t]), specs, [col[r] for r in rows])
                obj["cycle_index"] = f.cycle_index
                yield encode_json(obj) + b"\n"

    def byte_count(self, frames: Iterable[CycleFrame]) -> int:
        return sum(len(line) for f in frames for line in self.lines(f))

    def csv_header(self) -> list[str]:
        return ["cell", "cycle_index", "ts", *self.params]

    def csv_rows(self, f: CycleFrame) -> Iterator[list]:
        ts = f.tick_timestamps()
        dtypes = [DType(c.dtype) for c in self.schema]
        for t in range(f.T):
            yield [f.cell_id, f.cycle_index, int(ts[t]),
                   *(payload_value(dt, v) for dt, v in zip(dtypes, f.ticks[:, t].tolist()))]


def frames_from_ndjson(lines: Iterable[bytes | str], schema: Sequence[ColumnSpec]) -> Iterator[CycleFrame]:
    """Rebuild frames from the NDJSON export.

    Lines of one (cell, cycle_index) must be contiguous, as the exporter
    writes them.  Cycles are assumed gap-free, so ``end_ts`` is the last
    tick plus one second.
    """
    index = {(c.device_class, c.source_name): i for i, c in enumerate(schema)}
    params = tuple(c.canonical_id for c in schema)
    key = None
    cols: dict[int, np.ndarray] = {}

    def build():
        cell, cyc = key
        ts_sorted = sorted(cols)
        grid = np.column_stack([cols[t] for t in ts_sorted])
        if np.isnan(grid).any():
            raise ValueError(f"{cell} cycle {cyc}: missing values in NDJSON input")
        return _frame_with_scalars(cell, cyc, ts_sorted[0], ts_sorted[-1] + 1000, params, grid)

    for raw in lines:
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        if not raw.strip():
            continue
        obj = json.loads(raw)
        k = (obj["cell"], int(obj["cycle_index"]))
        if k != key:
            if key is not None:
                yield build()
            key, cols = k, {}
        ts = int(obj["ts"])
        col = cols.get(ts)
        if col is None:
            col = cols[ts] = np.full(len(params), np.nan)
        for name, v in obj["values"].items():
            try:
                col[index[(obj["device"], name)]] = float(v)
            except KeyError:
                raise SchemaMismatch(f"{obj['device']}/{name} is not in the store schema") from None
    if key is not None:
        yield build()


def _frame_with_scalars(cell: str, cycle: int, start_ms: int, end_ms: int, params: tuple[str, ...],
                        grid: np.ndarray) -> CycleFrame:
    scalars = {"energy_kwh": 0.0, "part_mass_g": 0.0}
    if ENERGY_PARAM in params:
        row = grid[params.index(ENERGY_PARAM)]
        scalars["energy_kwh"] = float(row[-1] - row[0])
    if MASS_PARAM in params:
        scalars["part_mass_g"] = float(grid[params.index(MASS_PARAM), -1])
    return CycleFrame(cell, cycle, start_ms, end_ms, params, grid, scalars)


# --- store -------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupIndex:
    offset: int
    length: int
    cell_id: str
    cycle_lo: int
    cycle_hi: int
    n_cycles: int
    n_ticks: int
    json_bytes: int
    chunks: tuple[tuple[int, int], ...]  # (offset, length) per column, absolute
    mins: tuple[float, ...]
    maxs: tuple[float, ...]

    def to_json(self) -> dict:
        return {"offset": self.offset, "length": self.length, "cell": self.cell_id, "lo": self.cycle_lo,
                "hi": self.cycle_hi, "cycles": self.n_cycles, "ticks": self.n_ticks,
                "json_bytes": self.json_bytes, "chunks": [list(c) for c in self.chunks],
                "min": list(self.mins), "max": list(self.maxs)}

    @classmethod
    def from_json(cls, d: dict) -> "GroupIndex":
        return cls(d["offset"], d["length"], d["cell"], d["lo"], d["hi"], d["cycles"], d["ticks"],
                   d["json_bytes"], tuple(tuple(c) for c in d["chunks"]), tuple(d["min"]), tuple(d["max"]))


@dataclass(frozen=True)
class CompressionReport:
    columnar_bytes: int
    json_bytes: int
    ratio: float
    observed_seconds: int
    fleet_cells: int
    annualized_tb: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def _fsync_dir(path: Path) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def _copy_prefix(src: int, dst: int, n: int) -> None:
    done = 0
    while done < n:
        try:
            k = os.copy_file_range(src, dst, n - done, done, done)
        except OSError:
            k = 0
        if k == 0:
            chunk = os.pread(src, min(n - done, 1 << 20), done)
            if not chunk:
                raise CorruptStore("store shorter than its data region")
            k = os.pwrite(dst, chunk, done)
        done += k


class ColumnStore:
    """Columnar store over one file.  Open with :meth:`create` or :meth:`open`."""

    def __init__(self, path: Path, schema: tuple[ColumnSpec, ...], groups: list[GroupIndex], data_end: int,
                 readonly: bool):
        self.path = Path(path)
        self.schema = schema
        self.groups = groups
        self.data_end = data_end
        self.readonly = readonly
        self.layout = JsonLayout(schema)
        self.params = self.layout.params
        self._col = {p: i for i, p in enumerate(self.params)}
        self._fd: int | None = None
        self._lockfd: int | None = None
        self.groups_read = 0
        self.fault_hook = None  # test hook: called with a stage name during commits
        if not readonly:
            self._lock()
            tmp = self._tmp_path()
            if tmp.exists():
                tmp.unlink()

    # --- lifecycle -----------------------------------------------------------

    @property
    def columns(self) -> tuple[str, ...]:
        return self.params + (TS_COLUMN,) + SCALAR_COLUMNS

    def _tmp_path(self) -> Path:
        return self.path.with_name(self.path.name + ".tmp")

    def _lock(self) -> None:
        fd = os.open(self.path.with_name(self.path.name + ".lock"), os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            os.close(fd)
            raise WriterLocked(f"{self.path} already has a writer") from None
        self._lockfd = fd

    @classmethod
    def create(cls, path: str | Path, schema: ParameterCatalog | Sequence[ColumnSpec]) -> "ColumnStore":
        path = Path(path)
        if path.exists():
            raise StorageError(f"{path} already exists")
        cols = tuple(ColumnSpec.from_param(p) if isinstance(p, ParameterSpec) else p for p in schema)
        if len({c.canonical_id for c in cols}) != len(cols):
            raise SchemaMismatch("duplicate column in schema")
        path.parent.mkdir(parents=True, exist_ok=True)
        store = cls(path, cols, [], len(MAGIC), readonly=False)
        store._commit(b"", [])
        return store

    @classmethod
    def open(cls, path: str | Path, readonly: bool = False) -> "ColumnStore":
        path = Path(path)
        schema, groups, data_end = cls._read_footer(path)
        return cls(path, schema, groups, data_end, readonly)

    @classmethod
    def open_or_create(cls, path: str | Path, schema) -> "ColumnStore":
        path = Path(path)
        if path.exists():
            store = cls.open(path)
            want = tuple(ColumnSpec.from_param(p) if isinstance(p, ParameterSpec) else p for p in schema)
            if store.schema != want:
                store.close()
                raise SchemaMismatch(f"{path} was written with a different schema")
            return store
        return cls.create(path, schema)

    @staticmethod
    def _read_footer(path: Path) -> tuple[tuple[ColumnSpec, ...], list[GroupIndex], int]:
        try:
            with open(path, "rb") as fh:
                size = os.fstat(fh.fileno()).st_size
                if size < len(MAGIC) + _TAIL.size:
                    raise CorruptStore(f"{path}: file too short ({size} bytes)")
                if fh.read(4) != MAGIC:
                    raise CorruptStore(f"{path}: bad leading magic")
                fh.seek(size - _TAIL.size)
                crc, flen, magic = _TAIL.unpack(fh.read(_TAIL.size))
                if magic != MAGIC:
                    raise CorruptStore(f"{path}: bad trailing magic")
                start = size - _TAIL.size - flen
                if start < len(MAGIC):
                    raise CorruptStore(f"{path}: footer length out of range")
                fh.seek(start)
                footer = fh.read(flen)
        except FileNotFoundError:
            raise StorageError(f"{path}: no such store") from None
        if zlib.crc32(footer) != crc:
            raise CorruptStore(f"{path}: footer checksum mismatch")
        meta = json.loads(footer)
        schema = tuple(ColumnSpec(c["id"], c["source"], c["device"], c["dtype"]) for c in meta["schema"])
        groups = [GroupIndex.from_json(g) for g in meta["groups"]]
        return schema, groups, start

    def refresh(self) -> None:
        """Pick up groups committed by another writer since this store was opened."""
        self.schema, self.groups, self.data_end = self._read_footer(self.path)
        self._close_fd()

    def _close_fd(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def close(self) -> None:
        self._close_fd()
        if self._lockfd is not None:
            os.close(self._lockfd)
            self._lockfd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # --- writing ---------------------------------------------------------------

    def _footer_bytes(self, groups: list[GroupIndex]) -> bytes:
        meta = {
            "version": 1,
            "schema": [{"id": c.canonical_id, "source": c.source_name, "device": c.device_class,
                        "dtype": c.dtype} for c in self.schema],
            "groups": [g.to_json() for g in groups],
        }
        footer = json.dumps(meta, separators=(",", ":")).encode("utf-8")
        return footer + _TAIL.pack(zlib.crc32(footer), len(footer), MAGIC)

    def _fault(self, stage: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(stage)

    def _commit(self, new_data: bytes, new_groups: list[GroupIndex]) -> None:
        groups = self.groups + new_groups
        footer = self._footer_bytes(groups)
        tmp = self._tmp_path()
        fd = os.open(tmp, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
        try:
            if self.groups or self.path.exists():
                src = os.open(self.path, os.O_RDONLY)
                try:
                    _copy_prefix(src, fd, self.data_end)
                finally:
                    os.close(src)
            else:
                os.pwrite(fd, MAGIC, 0)
            self._fault("copied")
            os.pwrite(fd, new_data, self.data_end)
            self._fault("data")
            os.pwrite(fd, footer, self.data_end + len(new_data))
            self._fault("footer")
            os.fsync(fd)
        finally:
            os.close(fd)
        self._fault("synced")
        os.replace(tmp, self.path)
        _fsync_dir(self.path.parent)
        self.groups = groups
        self.data_end += len(new_data)
        self._close_fd()

    def _encode_group(self, frames: Sequence[CycleFrame], base: int) -> tuple[bytes, GroupIndex]:
        cell = frames[0].cell_id
        ticks = np.concatenate([f.ticks for f in frames], axis=1)
        ts = np.concatenate([f.tick_timestamps() for f in frames]).astype(np.float64)
        scalars = {
            "_cycle_index": [f.cycle_index for f in frames],
            "_T": [f.T for f in frames],
            "_start_ts": [f.start_ts_ms for f in frames],
            "_end_ts": [f.end_ts_ms for f in frames],
            "_energy_kwh": [f.scalars.get("energy_kwh", 0.0) for f in frames],
            "_part_mass_g": [f.scalars.get("part_mass_g", 0.0) for f in frames],
            "_stale": [1.0 if f.stale else 0.0 for f in frames],
        }
        columns = [(p, ticks[i]) for i, p in enumerate(self.params)]
        columns.append((TS_COLUMN, ts))
        columns.extend((name, np.asarray(scalars[name], dtype=np.float64)) for name in SCALAR_COLUMNS)

        cell_b = cell.encode("utf-8")
        head = _GROUP_HEAD.pack(GROUP_MAGIC, len(frames), ticks.shape[1], len(columns), len(cell_b)) + cell_b
        parts = [head]
        pos = base + len(head)
        spans, mins, maxs = [], [], []
        for name, values in columns:
            chunk = encode_column(values, param_id=name)
            raw = chunk.to_bytes()
            parts.append(raw)
            spans.append((pos, len(raw)))
            mins.append(chunk.min)
            maxs.append(chunk.max)
            pos += len(raw)
        body = b"".join(parts)
        body += struct.pack("<I", zlib.crc32(body))
        index = GroupIndex(base, len(body), cell, frames[0].cycle_index, frames[-1].cycle_index, len(frames),
                           int(ticks.shape[1]), self.layout.byte_count(frames), tuple(spans), tuple(mins),
                           tuple(maxs))
        return body, index

    def write_rowgroup(self, frames: Sequence[CycleFrame]) -> int:
        """Append ``frames`` (one cell, consecutive cycles) as row groups of at most 256 cycles.

        All groups of one call are committed together.  Returns the number
        of data bytes appended.
        """
        if self.readonly:
            raise StorageError("store opened read-only")
        frames = list(frames)
        if not frames:
            return 0
        cell = frames[0].cell_id
        for i, f in enumerate(frames):
            if f.params != self.params:
                raise SchemaMismatch(f"frame params differ from store schema ({f.P} vs {len(self.params)})")
            if f.cell_id != cell:
                raise ValueError("frames of one row group must share a cell")
            if i and f.cycle_index != frames[i - 1].cycle_index + 1:
                raise ValueError("cycle indices within a row group must be consecutive")
        last = self.last_cycle(cell)
        if last is not None and frames[0].cycle_index <= last:
            raise ValueError(f"{cell}: cycle {frames[0].cycle_index} already stored (last is {last})")

        blobs, index = [], []
        base = self.data_end
        for k in range(0, len(frames), MAX_GROUP_CYCLES):
            body, gi = self._encode_group(frames[k:k + MAX_GROUP_CYCLES], base)
            blobs.append(body)
            index.append(gi)
            base += len(body)
        data = b"".join(blobs)
        self._commit(data, index)
        return len(data)

    # --- reading -------------------------------------------------------------

    def _read_fd(self) -> int:
        if self._fd is None:
            self._fd = os.open(self.path, os.O_RDONLY)
        return self._fd

    def _read_chunk(self, g: GroupIndex, col: int) -> np.ndarray:
        off, n = g.chunks[col]
        raw = os.pread(self._read_fd(), n, off)
        return decode_column(ColumnChunk.from_bytes(self.columns[col], raw))

    def verify(self) -> int:
        """Check every group CRC; returns the number of groups verified."""
        fd = self._read_fd()
        for g in self.groups:
            body = os.pread(fd, g.length, g.offset)
            if len(body) != g.length or zlib.crc32(body[:-4]) != struct.unpack("<I", body[-4:])[0]:
                raise CorruptStore(f"row group at {g.offset} fails its checksum")
        return len(self.groups)

    def cells(self) -> list[str]:
        return sorted({g.cell_id for g in self.groups})

    def last_cycle(self, cell_id: str) -> int | None:
        his = [g.cycle_hi for g in self.groups if g.cell_id == cell_id]
        return max(his) if his else None

    @property
    def n_cycles(self) -> int:
        return sum(g.n_cycles for g in self.groups)

    def scan(self, cell_id: str | None = None, cycle_range: tuple[int, int] | None = None,
             params: Sequence[str] | None = None) -> Iterator[CycleFrame]:
        """Yield stored frames ordered by (cell, cycle_index).

        ``cycle_range`` is inclusive on both ends.  Row groups whose cycle
        range (from the footer) misses the request are skipped unread; the
        ``groups_read`` counter counts the rest.
        """
        if params is None:
            cols = list(range(len(self.params)))
        else:
            try:
                cols = [self._col[p] for p in params]
            except KeyError as exc:
                raise UnknownParam(f"{exc.args[0]!r} is not a stored parameter") from None
        names = tuple(self.params[c] for c in cols)
        sc = {name: len(self.params) + 1 + i for i, name in enumerate(SCALAR_COLUMNS)}
        lo, hi = cycle_range if cycle_range is not None else (-(1 << 62), 1 << 62)
        ci = sc["_cycle_index"]
        selected = [g for g in self.groups
                    if (cell_id is None or g.cell_id == cell_id) and g.maxs[ci] >= lo and g.mins[ci] <= hi]
        selected.sort(key=lambda g: (g.cell_id, g.cycle_lo))
        for g in selected:
            self.groups_read += 1
            s = {name: self._read_chunk(g, idx) for name, idx in sc.items()}
            data = np.vstack([self._read_chunk(g, c) for c in cols]) if cols else np.empty((0, g.n_ticks))
            bounds = np.concatenate(([0], np.cumsum(s["_T"].astype(np.int64))))
            for k in range(g.n_cycles):
                cyc = int(s["_cycle_index"][k])
                if cyc < lo or cyc > hi:
                    continue
                yield CycleFrame(
                    cell_id=g.cell_id,
                    cycle_index=cyc,
                    start_ts_ms=int(s["_start_ts"][k]),
                    end_ts_ms=int(s["_end_ts"][k]),
                    params=names,
                    ticks=data[:, bounds[k]:bounds[k + 1]].copy(),
                    scalars={"energy_kwh": float(s["_energy_kwh"][k]), "part_mass_g": float(s["_part_mass_g"][k])},
                    stale=bool(s["_stale"][k]),
                )

    def compression_stats(self, fleet_cells: int = 80) -> CompressionReport:
        """Columnar vs NDJSON size, plus a fleet-wide yearly JSON volume estimate.

        The estimate scales the observed JSON bytes per cell-second to
        ``fleet_cells`` cells running all year.
        """
        if not self.groups:
            raise EmptyStore(f"{self.path} holds no row groups")
        columnar = os.stat(self.path).st_size
        json_bytes = sum(g.json_bytes for g in self.groups)
        seconds = sum(g.n_ticks for g in self.groups)
        annual = json_bytes / seconds * fleet_cells * SECONDS_PER_YEAR / 1e12
        return CompressionReport(columnar, json_bytes, json_bytes / columnar, seconds, fleet_cells, annual)

    # --- export ----------------------------------------------------------------

    def export(self, out: io.RawIOBase | io.BufferedIOBase, fmt: str = "ndjson", cell_id: str | None = None,
               cycle_range: tuple[int, int] | None = None) -> int:
        """Write the selection to a binary stream; returns bytes written."""
        if fmt == "ndjson":
            total = 0
            for f in self.scan(cell_id, cycle_range):
                for line in self.layout.lines(f):
                    out.write(line)
                    total += len(line)
            return total
        if fmt == "csv":
            text = io.TextIOWrapper(out, encoding="utf-8", newline="", write_through=True)
            w = csv.writer(text, lineterminator="\n")
            w.writerow(self.layout.csv_header())
            rows = 0
            for f in self.scan(cell_id, cycle_range):
                for row in self.layout.csv_rows(f):
                    w.writerow(row)
                    rows += 1
            text.flush()
            text.detach()
            return rows
        raise UnknownFormat(f"unknown export format {fmt!r}; use ndjson or csv")

    def ingest_ndjson(self, lines: Iterable[bytes | str]) -> int:
        """Append frames parsed from an NDJSON export; returns cycles written."""
        batch: list[CycleFrame] = []
        written = 0

        def flush():
            nonlocal written
            if batch:
                self.write_rowgroup(batch)
                written += len(batch)
                batch.clear()

        for f in frames_from_ndjson(lines, self.schema):
            if batch and (f.cell_id != batch[-1].cell_id or f.cycle_index != batch[-1].cycle_index + 1
                          or len(batch) >= MAX_GROUP_CYCLES):
                flush()
            batch.append(f)
        flush()
        return written

"""Domain vocabulary: parameter catalog, samples, cycle frames.

Every telemetry variable is identified by a canonical id such as
``inj.melt_temp``.  Machines report the same variable under a native name
(``ActSimPara1``) that differs by vendor, so ingest goes through
:func:`normalize_param` before anything else touches a sample.

Cycles are delimited by rising edges of a boolean "cycle start" signal and
turned into :class:`CycleFrame` objects (P parameters x T one-second ticks).
Detectors compare cycles of different length after :func:`resample_frame`
has put every row on a common grid.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import CatalogError, DegenerateCycle, UnknownParameter

CATALOG_HEADER = ("canonical_id", "source_name", "device_class", "unit", "dtype", "min", "max")

BOUNDARY_PARAM = "inj.cycle_start"
ENERGY_PARAM = "en.energy_kwh"
MASS_PARAM = "scl.part_mass_g"


class DeviceClass(str, enum.Enum):
    INJECTION_MACHINE = "injection_machine"
    ROBOT6AX = "robot6ax"
    ENERGY_ANALYZER = "energy_analyzer"
    WATER_COLLECTOR = "water_collector"
    PRECISION_SCALE = "precision_scale"
    AMBIENT_SENSOR = "ambient_sensor"
    TEMPERATURE_SENSOR = "temperature_sensor"

    def __str__(self) -> str:
        return self.value


class DType(str, enum.Enum):
    F64 = "f64"
    I64 = "i64"
    BOOL = "bool"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class ParameterSpec:
    canonical_id: str
    source_name: str
    device_class: DeviceClass
    unit: str
    dtype: DType
    nominal_min: float
    nominal_max: float

    def __post_init__(self):
        if not self.canonical_id or not self.source_name:
            raise CatalogError("canonical_id and source_name must be non-empty")
        if not self.nominal_min < self.nominal_max:
            raise CatalogError(f"{self.canonical_id}: nominal_min must be < nominal_max")
        if self.dtype is DType.BOOL and (self.nominal_min, self.nominal_max) != (0, 1):
            raise CatalogError(f"{self.canonical_id}: bool parameters have range [0, 1]")

    @property
    def nominal_range(self) -> float:
        return self.nominal_max - self.nominal_min


class ParameterCatalog:
    """Ordered, immutable set of :class:`ParameterSpec`.

    Order matters: it fixes row order in every frame built from this catalog
    and key order in every JSON payload.
    """

    def __init__(self, specs: Iterable[ParameterSpec]):
        self._specs: tuple[ParameterSpec, ...] = tuple(specs)
        self._by_id: dict[str, ParameterSpec] = {}
        self._by_source: dict[tuple[DeviceClass, str], ParameterSpec] = {}
        for spec in self._specs:
            if spec.canonical_id in self._by_id:
                raise CatalogError(f"duplicate canonical_id {spec.canonical_id!r}")
            key = (spec.device_class, spec.source_name.lower())
            if key in self._by_source:
                raise CatalogError(f"duplicate source name {spec.source_name!r} for {spec.device_class}")
            self._by_id[spec.canonical_id] = spec
            self._by_source[key] = spec

    @classmethod
    def from_csv(cls, text: str) -> "ParameterCatalog":
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        reader = csv.reader(io.StringIO("\n".join(lines)))
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CATALOG_HEADER:
            raise CatalogError(f"catalog header must be {','.join(CATALOG_HEADER)}")
        specs = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CATALOG_HEADER):
                raise CatalogError(f"catalog row {lineno}: expected {len(CATALOG_HEADER)} fields")
            cid, src, dev, unit, dtype, lo, hi = (c.strip() for c in row)
            try:
                specs.append(
                    ParameterSpec(cid, src, DeviceClass(dev), unit, DType(dtype), float(lo), float(hi))
                )
            except ValueError as exc:
                raise CatalogError(f"catalog row {lineno}: {exc}") from exc
        return cls(specs)

    @classmethod
    def load(cls, path: str | Path) -> "ParameterCatalog":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def demo(cls) -> "ParameterCatalog":
        text = resources.files("cyclewatch").joinpath("data/demo_catalog.csv").read_text(encoding="utf-8")
        return cls.from_csv(text)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(CATALOG_HEADER)
        for s in self._specs:
            w.writerow([s.canonical_id, s.source_name, s.device_class.value, s.unit, s.dtype.value,
                        _fmt_bound(s.nominal_min), _fmt_bound(s.nominal_max)])
        return out.getvalue()

    def __len__(self) -> int:
        return len(self._specs)

    def __iter__(self) -> Iterator[ParameterSpec]:
        return iter(self._specs)

    def __contains__(self, canonical_id: object) -> bool:
        return canonical_id in self._by_id

    def __getitem__(self, canonical_id: str) -> ParameterSpec:
        try:
            return self._by_id[canonical_id]
        except KeyError:
            raise UnknownParameter(f"unknown canonical id {canonical_id!r}") from None

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(s.canonical_id for s in self._specs)

    def devices(self) -> list[DeviceClass]:
        """Device classes present, in order of first appearance."""
        seen: dict[DeviceClass, None] = {}
        for s in self._specs:
            seen.setdefault(s.device_class, None)
        return list(seen)

    def for_device(self, device_class: DeviceClass) -> list[ParameterSpec]:
        return [s for s in self._specs if s.device_class is device_class]

    def lookup_source(self, source_name: str, device_class: DeviceClass) -> ParameterSpec | None:
        return self._by_source.get((DeviceClass(device_class), source_name.lower()))


def _fmt_bound(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(x)


def normalize_param(source_name: str, device_class: DeviceClass | str, catalog: ParameterCatalog) -> ParameterSpec:
    """Map a machine-native parameter name onto its catalog entry.

    Matching is exact on the device class and case-insensitive on the name.
    Raises :class:`UnknownParameter` for a catalog gap; callers quarantine
    such samples instead of dropping them.
    """
    if not source_name:
        raise UnknownParameter("empty source name")
    try:
        dc = DeviceClass(device_class)
    except ValueError:
        raise UnknownParameter(f"unknown device class {device_class!r}") from None
    spec = catalog.lookup_source(source_name, dc)
    if spec is None:
        raise UnknownParameter(f"{source_name!r} not in catalog for {dc.value}")
    return spec


@dataclass(frozen=True, slots=True)
class TelemetrySample:
    cell_id: str
    device_class: DeviceClass
    param_id: str
    ts_ms: int
    value: float

    def __post_init__(self):
        if self.ts_ms <= 0:
            raise ValueError("ts_ms must be positive")


# --- wire payloads -------------------------------------------------------------
#
# One JSON object per (cell, device, second):
#   {"cell":"cell01","device":"energy_analyzer","ts":1700000000000,"values":{"PwrActTot":41.2,...}}
# Keys in ``values`` are machine-native source names in catalog order.  The
# same serializer produces the NDJSON export, so byte counts are comparable.


def payload_value(dtype: DType, v: float) -> float | int:
    return float(v) if dtype is DType.F64 else int(v)


def payload_dict(cell_id: str, device: DeviceClass | str, ts_ms: int,
                 specs: Sequence[ParameterSpec], values: Sequence[float]) -> dict:
    return {
        "cell": cell_id,
        "device": str(device),
        "ts": int(ts_ms),
        "values": {s.source_name: payload_value(s.dtype, v) for s, v in zip(specs, values)},
    }


def encode_json(obj: dict) -> bytes:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False).encode("utf-8")


def payload_topic(cell_id: str, device: DeviceClass | str) -> str:
    return f"flatform/{cell_id}/{device}/data"


def decode_payload(raw: bytes | str, catalog: ParameterCatalog) -> tuple[list[TelemetrySample], list[str]]:
    """Parse one device payload into normalized samples.

    Returns ``(samples, unknown)`` where ``unknown`` lists source names the
    catalog does not know; those are for quarantine, not silent loss.
    Raises ``ValueError`` on structurally invalid JSON.
    """
    obj = json.loads(raw)
    try:
        cell, device, ts, values = obj["cell"], obj["device"], int(obj["ts"]), obj["values"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"payload missing field: {exc}") from None
    samples = []
    unknown = []
    for name, v in values.items():
        try:
            spec = normalize_param(name, device, catalog)
        except UnknownParameter:
            unknown.append(name)
            continue
        samples.append(TelemetrySample(cell, spec.device_class, spec.canonical_id, ts, float(v)))
    return samples, unknown


@dataclass(eq=False)
class CycleFrame:
    """One machine cycle: ``ticks[p, t]`` is parameter ``params[p]`` at second t."""

    cell_id: str
    cycle_index: int
    start_ts_ms: int
    end_ts_ms: int
    params: tuple[str, ...]
    ticks: np.ndarray
    scalars: dict[str, float] = field(default_factory=dict)
    stale: bool = False

    def __post_init__(self):
        self.params = tuple(self.params)
        self.ticks = np.asarray(self.ticks, dtype=np.float64)
        if self.ticks.ndim != 2 or self.ticks.shape[0] != len(self.params):
            raise ValueError(f"ticks shape {self.ticks.shape} does not match {len(self.params)} params")
        if self.end_ts_ms <= self.start_ts_ms:
            raise ValueError("end_ts_ms must be greater than start_ts_ms")

    @property
    def P(self) -> int:
        return self.ticks.shape[0]

    @property
    def T(self) -> int:
        return self.ticks.shape[1]

    def row(self, param_id: str) -> np.ndarray:
        return self.ticks[self.params.index(param_id)]

    def tick_timestamps(self) -> np.ndarray:
        return self.start_ts_ms + 1000 * np.arange(self.T, dtype=np.int64)

    def equals(self, other: "CycleFrame", atol: float = 0.0) -> bool:
        if (self.cell_id, self.cycle_index, self.start_ts_ms, self.end_ts_ms, self.params, self.stale) != (
            other.cell_id, other.cycle_index, other.start_ts_ms, other.end_ts_ms, other.params, other.stale
        ):
            return False
        if self.ticks.shape != other.ticks.shape:
            return False
        if not np.allclose(self.ticks, other.ticks, rtol=0.0, atol=atol):
            return False
        return self.scalars == other.scalars


@dataclass(eq=False)
class ResampledFrame:
    cell_id: str
    cycle_index: int
    params: tuple[str, ...]
    grid: np.ndarray

    @property
    def L(self) -> int:
        return self.grid.shape[1]


def resample_frame(f: CycleFrame, L: int = 64) -> ResampledFrame:
    """Linearly interpolate every row of ``f`` onto L equally spaced points over [0, T-1]."""
    if f.T < 2:
        raise DegenerateCycle(f"cycle {f.cell_id}/{f.cycle_index} has T={f.T} < 2")
    if L < 2:
        raise ValueError("L must be >= 2")
    if L == f.T:
        grid = f.ticks.copy()
    else:
        src = np.arange(f.T, dtype=np.float64)
        dst = np.linspace(0.0, f.T - 1.0, L)
        # np.interp per row; vectorized form of the same piecewise-linear rule
        idx = np.minimum(np.floor(dst).astype(np.int64), f.T - 2)
        w = dst - src[idx]
        left = f.ticks[:, idx]
        right = f.ticks[:, idx + 1]
        grid = left + (right - left) * w
        grid[:, 0] = f.ticks[:, 0]
        grid[:, -1] = f.ticks[:, -1]
    if not np.all(np.isfinite(grid)):
        raise DegenerateCycle(f"cycle {f.cell_id}/{f.cycle_index} contains non-finite values")
    return ResampledFrame(f.cell_id, f.cycle_index, f.params, grid)


class CycleAssembler:
    """Turn one cell's ordered sample stream into cycle frames.

    Samples are bucketed per whole second.  A bucket is finalized once a
    later second shows up, so samples of the same second may arrive in any
    device order.  Samples older than the pending second are counted as
    ``late`` and ignored; retransmitted duplicates land there.
    """

    def __init__(
        self,
        params: Sequence[str],
        boundary_param: str = BOUNDARY_PARAM,
        energy_param: str | None = ENERGY_PARAM,
        mass_param: str | None = MASS_PARAM,
        timeout_s: float = 600.0,
        cell_id: str | None = None,
        first_cycle_index: int = 0,
    ):
        self.params = tuple(params)
        if boundary_param not in self.params:
            raise UnknownParameter(f"boundary parameter {boundary_param!r} not in parameter list")
        if len(self.params) < 2:
            raise ValueError("need at least two parameters per frame")
        self._row = {p: i for i, p in enumerate(self.params)}
        self._boundary = self._row[boundary_param]
        self._energy = self._row.get(energy_param) if energy_param else None
        self._mass = self._row.get(mass_param) if mass_param else None
        self.timeout_ms = int(timeout_s * 1000)
        self.cell_id = cell_id
        self.next_index = first_cycle_index

        self._pending_sec: int | None = None
        self._pending = np.full(len(self.params), np.nan)
        self._prev_flag = 0.0
        self._open_start: int | None = None  # second number of the opening edge
        self._open_secs: list[tuple[int, np.ndarray]] = []
        self._carry = np.full(len(self.params), np.nan)

        self.late_samples = 0
        self.preamble_samples = 0
        self.stale_cycles = 0
        self.empty_cycles = 0
        self.unfilled_rows = 0

    @property
    def earliest_open_second(self) -> int | None:
        """Oldest second whose samples an unfinished cycle still needs."""
        return self._open_start if self._open_start is not None else self._pending_sec

    def push(self, sample: TelemetrySample) -> list[CycleFrame]:
        if self.cell_id is None:
            self.cell_id = sample.cell_id
        elif sample.cell_id != self.cell_id:
            raise ValueError(f"assembler for {self.cell_id!r} got sample for {sample.cell_id!r}")
        row = self._row.get(sample.param_id)
        if row is None:
            raise UnknownParameter(f"{sample.param_id!r} not assembled by this frame layout")
        sec = sample.ts_ms // 1000
        out: list[CycleFrame] = []
        if self._pending_sec is None:
            self._pending_sec = sec
        elif sec < self._pending_sec:
            self.late_samples += 1
            return out
        elif sec > self._pending_sec:
            out.extend(self._finalize_second())
            self._pending_sec = sec
        self._pending[row] = sample.value
        return out

    def push_many(self, samples: Iterable[TelemetrySample]) -> list[CycleFrame]:
        out: list[CycleFrame] = []
        for s in samples:
            out.extend(self.push(s))
        return out

    def flush(self, emit_open: bool = False) -> list[CycleFrame]:
        """Finalize the pending second.

        The open cycle has no closing edge yet; it is emitted (flagged stale)
        only when ``emit_open`` is set.
        """
        out = self._finalize_second() if self._pending_sec is not None else []
        self._pending_sec = None
        if emit_open and self._open_start is not None:
            last = self._open_secs[-1][0] if self._open_secs else self._open_start
            frame = self._close((last + 1) * 1000, stale=True)
            if frame is not None:
                out.append(frame)
            self._open_start = None
            self._open_secs = []
        return out

    def _finalize_second(self) -> list[CycleFrame]:
        sec = self._pending_sec
        values = self._pending
        self._pending = np.full(len(self.params), np.nan)
        out: list[CycleFrame] = []

        flag = values[self._boundary]
        edge = False
        if not math.isnan(flag):
            edge = flag >= 0.5 and self._prev_flag < 0.5
            self._prev_flag = flag

        if edge:
            if self._open_start is not None:
                frame = self._close(sec * 1000, stale=False)
                if frame is not None:
                    out.append(frame)
            self._open_start = sec
            self._open_secs = []

        if self._open_start is None:
            self.preamble_samples += int(np.count_nonzero(~np.isnan(values)))
            return out

        self._open_secs.append((sec, values))
        if (sec + 1 - self._open_start) * 1000 >= self.timeout_ms:
            frame = self._close((sec + 1) * 1000, stale=True)
            self.stale_cycles += 1
            if frame is not None:
                out.append(frame)
            self._open_start = None
            self._open_secs = []
        return out

    def _close(self, end_ms: int, stale: bool) -> CycleFrame | None:
        start_sec = self._open_start
        T = end_ms // 1000 - start_sec
        P = len(self.params)
        grid = np.full((P, T), np.nan)
        for sec, vals in self._open_secs:
            t = sec - start_sec
            if 0 <= t < T:
                grid[:, t] = vals
        observed = ~np.isnan(grid)
        non_boundary = np.delete(observed, self._boundary, axis=0)
        if not non_boundary.any():
            self.empty_cycles += 1
            self.next_index += 1
            return None

        scalars = {
            "energy_kwh": _first_last_diff(grid[self._energy]) if self._energy is not None else 0.0,
            "part_mass_g": _last_observed(grid[self._mass]) if self._mass is not None else 0.0,
        }
        for p in range(P):
            row = grid[p]
            obs = observed[p]
            if not obs.any():
                fill = self._carry[p]
                if math.isnan(fill):
                    fill = 0.0
                    self.unfilled_rows += 1
                row[:] = fill
                continue
            _locf_inplace(row, obs)
            self._carry[p] = row[-1]

        frame = CycleFrame(
            cell_id=self.cell_id,
            cycle_index=self.next_index,
            start_ts_ms=start_sec * 1000,
            end_ts_ms=end_ms,
            params=self.params,
            ticks=grid,
            scalars=scalars,
            stale=stale,
        )
        self.next_index += 1
        return frame


def _locf_inplace(row: np.ndarray, observed: np.ndarray) -> None:
    """Last observation carried forward, leading gap back-filled."""
    idx = np.where(observed, np.arange(row.size), -1)
    np.maximum.accumulate(idx, out=idx)
    first = int(np.argmax(observed))
    idx[idx < 0] = first
    row[:] = row[idx]


def _first_last_diff(row: np.ndarray) -> float:
    obs = row[~np.isnan(row)]
    if obs.size == 0:
        return 0.0
    return float(obs[-1] - obs[0])


def _last_observed(row: np.ndarray) -> float:
    obs = row[~np.isnan(row)]
    return float(obs[-1]) if obs.size else 0.0


def assemble_cycle(
    samples: Iterable[TelemetrySample],
    boundary_param: str = BOUNDARY_PARAM,
    params: Sequence[str] | None = None,
    **kwargs,
) -> Iterator[CycleFrame]:
    """Generator form of :class:`CycleAssembler` for a single cell's stream.

    ``params`` defaults to the parameters seen in the stream, in order of
    first appearance; that requires buffering, so pass it for long streams.
    """
    if params is None:
        samples = list(samples)
        seen: dict[str, None] = {}
        for s in samples:
            seen.setdefault(s.param_id, None)
        params = list(seen)
    asm = CycleAssembler(params, boundary_param, **kwargs)
    for s in samples:
        yield from asm.push(s)
    yield from asm.flush()

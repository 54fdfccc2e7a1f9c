"""Deterministic telemetry generator for injection-molding cells, with labeled anomalies.

Each parameter follows a template defined on the cycle phase
``u = t / (T - 1)``, so cycles of different length line up after
resampling.  A template mixes a shared machine-activity curve with a
parameter-specific phase curve (injection pulse, hold plateau, screw
recovery, cooling decay, mold open), which gives the strong and stable
cross-correlations the correlation detectors rely on.  Slow-moving sensors
(ambient, water, cabinet) still carry a small cycle-locked ripple on top of
AR(1) noise.

Randomness comes from one generator per (seed, cell, cycle, purpose), so
any cycle can be regenerated on its own.  Values are rounded to a per
parameter sensor resolution; that keeps them exactly representable at the
store's 1e-6 fixed-point scale.
"""

from __future__ import annotations

import enum
import json
import math
import time
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ParamUnavailable
from .model import (
    BOUNDARY_PARAM,
    ENERGY_PARAM,
    MASS_PARAM,
    CycleFrame,
    DType,
    ParameterCatalog,
    ParameterSpec,
    encode_json,
    payload_dict,
    payload_topic,
)

EPOCH_START_MS = 1_700_000_000_000
POWER_PARAM = "en.active_power_kw"
CURRENT_PARAM = "en.current_l1_a"
SURGE_FACTOR = 1.5


class AnomalyKind(str, enum.Enum):
    SPIKE = "spike"
    DRIFT = "drift"
    STUCK_SENSOR = "stuck_sensor"
    CORRELATION_BREAK = "correlation_break"
    ENERGY_SURGE = "energy_surge"

    def __str__(self) -> str:
        return self.value


ALL_KINDS = tuple(AnomalyKind)


@dataclass(frozen=True)
class CellConfig:
    cell_id: str
    catalog: ParameterCatalog = field(default_factory=ParameterCatalog.demo, compare=False)
    cycle_len_s_mean: float = 30.0
    cycle_len_s_jitter: float = 1.5
    seed: int = 0
    anomaly_rate: float = 0.05
    kinds: tuple[AnomalyKind, ...] = ALL_KINDS
    epoch_start_ms: int = EPOCH_START_MS
    noise: float = 0.05       # white noise, fraction of template amplitude
    cycle_var: float = 0.02   # cycle-to-cycle amplitude and level variation

    def __post_init__(self):
        if not self.cycle_len_s_mean > 2 * self.cycle_len_s_jitter:
            raise ValueError("cycle_len_s_mean must exceed 2 * cycle_len_s_jitter")
        if self.cycle_len_s_mean - 2 * self.cycle_len_s_jitter < 2:
            raise ValueError("cycles must be at least 2 s long")
        if not 0.0 <= self.anomaly_rate < 0.5:
            raise ValueError("anomaly_rate must be in [0, 0.5)")
        if BOUNDARY_PARAM not in self.catalog:
            raise ValueError(f"catalog lacks the cycle boundary parameter {BOUNDARY_PARAM}")
        object.__setattr__(self, "kinds", tuple(AnomalyKind(k) for k in self.kinds))


@dataclass(frozen=True)
class AnomalyLabel:
    cell_id: str
    cycle_index: int
    kind: AnomalyKind
    affected_params: tuple[str, ...]

    def __post_init__(self):
        if not self.affected_params:
            raise ValueError("an anomaly affects at least one parameter")

    def to_json(self) -> dict:
        return {"cell_id": self.cell_id, "cycle_index": self.cycle_index, "kind": self.kind.value,
                "affected_params": list(self.affected_params)}

    @classmethod
    def from_json(cls, d: dict) -> "AnomalyLabel":
        return cls(d["cell_id"], int(d["cycle_index"]), AnomalyKind(d["kind"]), tuple(d["affected_params"]))


# --- random streams ----------------------------------------------------------------

_STREAMS = {"len": 0, "shape": 1, "anomaly": 2, "cell": 3, "mass": 4}


def _rng(seed: int, cell_id: str, cycle_index: int, purpose: str) -> np.random.Generator:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, zlib.crc32(cell_id.encode()),
                                 cycle_index, _STREAMS[purpose]])
    return np.random.default_rng(ss)


# --- phase curves ----------------------------------------------------------------------


def _bump(u: np.ndarray, a: float, b: float) -> np.ndarray:
    x = np.clip((u - a) / (b - a), 0.0, 1.0)
    return np.sin(np.pi * x) ** 2


def _activity(u):
    return np.exp(-3.0 * u)


SHAPES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "inject": lambda u: _bump(u, -0.05, 0.2),
    "hold": lambda u: _bump(u, 0.05, 0.45),
    "plast": lambda u: _bump(u, 0.3, 0.7),
    "cool": lambda u: np.exp(-u / 0.3),
    "open": lambda u: _bump(u, 0.6, 1.0),
    "ramp": lambda u: 1.0 - u,
    "wave": lambda u: 0.5 + 0.5 * np.cos(2 * np.pi * u),
}


@dataclass(frozen=True)
class Profile:
    """How one parameter behaves: ``level + sign * amp * mix(u)`` plus noise."""
    level: float
    amp: float
    shape: str
    sign: float = 1.0
    share: float = 0.6     # weight of the shared activity curve
    ar1: float = 0.0       # AR(1) coefficient of the noise
    noise: float = 1.0     # noise multiplier on top of the cell setting
    resolution: float | None = None


# level, amp and shape per parameter of the demo catalog; anything else gets
# a generic profile derived from its nominal range
DEMO_PROFILES: dict[str, Profile] = {
    "inj.melt_temp": Profile(232.0, 6.0, "cool"),
    "inj.injection_pressure": Profile(60.0, 1100.0, "inject"),
    "inj.hold_pressure": Profile(30.0, 700.0, "hold", share=0.5),
    "inj.screw_position": Profile(30.0, 110.0, "ramp"),
    "inj.screw_speed": Profile(5.0, 160.0, "inject"),
    "inj.screw_rpm": Profile(20.0, 180.0, "plast", sign=-1.0, share=0.5),
    "inj.back_pressure": Profile(15.0, 90.0, "plast", sign=-1.0, share=0.5),
    "inj.clamp_force": Profile(300.0, 1800.0, "hold"),
    "inj.mold_position": Profile(40.0, 450.0, "open", sign=-1.0, share=0.5),
    "inj.ejector_position": Profile(10.0, 80.0, "open", sign=-1.0, share=0.5),
    "inj.barrel_temp_z1": Profile(205.0, 5.0, "cool"),
    "inj.barrel_temp_z2": Profile(218.0, 5.0, "cool"),
    "inj.barrel_temp_z3": Profile(226.0, 5.0, "cool"),
    "inj.nozzle_temp": Profile(235.0, 7.0, "inject"),
    "inj.oil_temp": Profile(42.0, 2.5, "wave"),
    "inj.mold_temp_fixed": Profile(55.0, 9.0, "cool"),
    "inj.mold_temp_moving": Profile(52.0, 9.0, "cool"),
    "inj.hydraulic_pressure": Profile(30.0, 150.0, "inject"),
    "inj.motor_torque": Profile(80.0, 900.0, "plast", share=0.5),
    "rob.axis1_angle": Profile(-30.0, 110.0, "open", sign=-1.0, share=0.5),
    "rob.axis2_angle": Profile(15.0, 60.0, "open", sign=-1.0, share=0.5),
    "rob.axis3_angle": Profile(-20.0, 70.0, "open", share=0.5),
    "rob.tcp_speed": Profile(0.0, 1200.0, "open", sign=-1.0, share=0.5),
    "rob.gripper_vacuum": Profile(-5.0, 70.0, "open", share=0.5),
    "en.active_power_kw": Profile(22.0, 70.0, "inject"),
    "en.current_l1_a": Profile(45.0, 140.0, "inject"),
    "en.voltage_l1_v": Profile(231.0, 3.0, "inject", sign=-1.0),
    "en.power_factor": Profile(0.78, 0.12, "inject"),
    "wat.flow_lpm": Profile(32.0, 9.0, "cool"),
    "wat.supply_temp": Profile(18.0, 1.2, "wave", ar1=0.8),
    "wat.return_temp": Profile(24.0, 3.0, "cool", ar1=0.6),
    "wat.pressure_bar": Profile(4.2, 0.8, "cool"),
    "amb.humidity": Profile(45.0, 1.0, "wave", ar1=0.9),
    "amb.pressure_hpa": Profile(1012.0, 0.6, "wave", ar1=0.9),
    "tmp.ambient_c": Profile(24.0, 0.8, "wave", ar1=0.9),
    "tmp.cabinet_c": Profile(33.0, 1.5, "cool", ar1=0.8),
}


def _profile(spec: ParameterSpec) -> Profile:
    p = DEMO_PROFILES.get(spec.canonical_id)
    if p is None:
        h = zlib.crc32(spec.canonical_id.encode())
        shapes = sorted(SHAPES)
        p = Profile(spec.nominal_min + 0.4 * spec.nominal_range, 0.2 * spec.nominal_range,
                    shapes[h % len(shapes)], sign=1.0 if h & 0x100 else -1.0, share=0.5)
    return p


def _resolution(p: Profile, noise: float) -> float:
    if p.resolution is not None:
        return p.resolution
    # about ten resolution steps per noise standard deviation
    sd = max(p.amp * max(noise, 1e-4) * p.noise, 1e-12)
    return 10.0 ** math.floor(math.log10(sd / 10.0))


def _round(values: np.ndarray, res: float) -> np.ndarray:
    # round on the decimal grid; res is a power of ten
    digits = max(0, -int(round(math.log10(res))))
    # adding 0.0 turns -0.0 into 0.0, which no real sensor reports
    return np.round(np.round(values / res) * res, digits) + 0.0


@dataclass(frozen=True)
class _Layout:
    ids: tuple[str, ...]
    specs: tuple[ParameterSpec, ...]
    profiles: tuple[Profile, ...]
    res: np.ndarray
    boundary: int
    energy: int | None
    power: int | None
    current: int | None
    mass: int | None
    stable: int | None
    analog: tuple[int, ...]


def _layout(catalog: ParameterCatalog, noise: float) -> _Layout:
    # keyed by catalog content so equal catalogs built separately share the memo
    return _layout_for(tuple(catalog), noise)


@lru_cache(maxsize=64)
def _layout_for(specs: tuple[ParameterSpec, ...], noise: float) -> _Layout:
    ids = tuple(s.canonical_id for s in specs)
    profiles = tuple(_profile(s) for s in specs)
    res = np.array([_resolution(p, noise) for p in profiles])
    idx = {pid: i for i, pid in enumerate(ids)}
    special = {BOUNDARY_PARAM, ENERGY_PARAM, MASS_PARAM, "scl.stable"}
    analog = tuple(i for i, s in enumerate(specs) if s.dtype is DType.F64 and s.canonical_id not in special)
    return _Layout(ids, specs, profiles, res, idx[BOUNDARY_PARAM], idx.get(ENERGY_PARAM), idx.get(POWER_PARAM),
                   idx.get(CURRENT_PARAM), idx.get(MASS_PARAM), idx.get("scl.stable"), analog)


# --- cycle generation --------------------------------------------------------------


def cycle_length(cfg: CellConfig, cycle_index: int) -> int:
    rng = _rng(cfg.seed, cfg.cell_id, cycle_index, "len")
    lo = math.ceil(cfg.cycle_len_s_mean - 2 * cfg.cycle_len_s_jitter)
    hi = math.floor(cfg.cycle_len_s_mean + 2 * cfg.cycle_len_s_jitter)
    return int(np.clip(round(cfg.cycle_len_s_mean + cfg.cycle_len_s_jitter * rng.standard_normal()), lo, hi))


class _CellTimeline:
    """Per-cell memo: cumulative cycle starts and constant offsets."""

    def __init__(self, cfg: CellConfig, lay: "_Layout"):
        self.cfg = cfg
        self.lay = lay
        rng = _rng(cfg.seed, cfg.cell_id, 0, "cell")
        amps = np.array([p.amp for p in lay.profiles])
        self.offsets = rng.normal(0.0, 0.05, len(amps)) * amps
        self.part_mass = float(rng.uniform(150.0, 450.0))
        self.starts = [0]

    def start_s(self, cycle_index: int) -> int:
        while len(self.starts) <= cycle_index:
            k = len(self.starts) - 1
            self.starts.append(self.starts[-1] + cycle_length(self.cfg, k))
        return self.starts[cycle_index]


_timelines: dict[tuple, _CellTimeline] = {}


def _timeline(cfg: CellConfig) -> _CellTimeline:
    key = (cfg.seed, cfg.cell_id, cfg.cycle_len_s_mean, cfg.cycle_len_s_jitter, cfg.noise, cfg.cycle_var,
           tuple(cfg.catalog))
    tl = _timelines.get(key)
    if tl is None:
        if len(_timelines) > 256:
            _timelines.clear()
        tl = _timelines[key] = _CellTimeline(cfg, _layout(cfg.catalog, cfg.noise))
    return tl


def _base_grid(cfg: CellConfig, lay: _Layout, offsets: np.ndarray, cycle_index: int) -> tuple[np.ndarray, int]:
    T = cycle_length(cfg, cycle_index)
    rng = _rng(cfg.seed, cfg.cell_id, cycle_index, "shape")
    u = np.linspace(0.0, 1.0, T)
    act = _activity(u)
    act = (act - act.mean()) / (act.std() + 1e-12)
    n = len(lay.profiles)
    grid = np.empty((n, T))
    amp_var = 1.0 + cfg.cycle_var * rng.standard_normal(n)
    lvl_var = cfg.cycle_var * rng.standard_normal(n)
    eps = rng.standard_normal((n, T))
    for i, p in enumerate(lay.profiles):
        own = SHAPES[p.shape](u)
        own = (own - own.mean()) / (own.std() + 1e-12)
        mix = p.share * act + (1.0 - p.share) * own
        mix = (mix - mix.min()) / (mix.max() - mix.min() + 1e-12)
        noise = eps[i]
        if p.ar1:
            noise = noise.copy()
            for t in range(1, T):
                noise[t] = p.ar1 * noise[t - 1] + math.sqrt(1 - p.ar1 ** 2) * eps[i, t]
        base = p.level + offsets[i] + lvl_var[i] * p.amp
        shape = mix if p.sign > 0 else 1.0 - mix
        grid[i] = base + p.amp * amp_var[i] * shape + cfg.noise * p.noise * p.amp * noise
    return grid, T


def generate_cycle(cfg: CellConfig, cycle_index: int) -> CycleFrame:
    """The clean frame of one cycle; a pure function of (cfg, cycle_index)."""
    if cycle_index < 0:
        raise ValueError("cycle_index must be non-negative")
    lay = _layout(cfg.catalog, cfg.noise)
    tl = _timeline(cfg)
    grid, T = _base_grid(cfg, lay, tl.offsets, cycle_index)
    u = np.linspace(0.0, 1.0, T)

    if lay.power is not None:
        grid[lay.power] = np.clip(grid[lay.power], 0.0, None)
    for i in range(len(lay.ids)):
        spec = lay.specs[i]
        lo = spec.nominal_min - 2 * spec.nominal_range
        hi = spec.nominal_max + 2 * spec.nominal_range
        grid[i] = _round(np.clip(grid[i], lo, hi), lay.res[i])

    grid[lay.boundary] = 0.0
    grid[lay.boundary, 0] = 1.0
    on_scale = u >= 0.9
    if lay.mass is not None:
        rng = _rng(cfg.seed, cfg.cell_id, cycle_index, "mass")
        mass = round(tl.part_mass + 0.3 * rng.standard_normal(), 2)
        grid[lay.mass] = np.where(on_scale, mass, 0.0)
    if lay.stable is not None:
        grid[lay.stable] = on_scale.astype(float)
    if lay.energy is not None and lay.power is not None:
        # per-cycle accumulator: resets at the boundary, climbs with power
        ramp = np.concatenate(([0.0], np.cumsum(grid[lay.power][:-1]) / 3600.0))
        grid[lay.energy] = _round(ramp, 1e-4)

    start = cfg.epoch_start_ms + 1000 * tl.start_s(cycle_index)
    return CycleFrame(cfg.cell_id, cycle_index, start, start + 1000 * T, lay.ids, grid, _scalars(lay, grid))


def _scalars(lay: _Layout, grid: np.ndarray) -> dict[str, float]:
    return {
        "energy_kwh": float(grid[lay.energy, -1] - grid[lay.energy, 0]) if lay.energy is not None else 0.0,
        "part_mass_g": float(grid[lay.mass, -1]) if lay.mass is not None else 0.0,
    }


# --- anomaly injection ---------------------------------------------------------------


def _pearson_rows(grid: np.ndarray, j: int) -> float:
    """Mean |r| between row j and every other non-constant row."""
    x = grid[j] - grid[j].mean()
    others = np.delete(grid, j, axis=0)
    others = others - others.mean(axis=1, keepdims=True)
    sx = np.sqrt((x * x).sum())
    so = np.sqrt((others * others).sum(axis=1))
    ok = so > 1e-12
    if sx < 1e-12 or not ok.any():
        return 0.0
    r = (others[ok] @ x) / (so[ok] * sx)
    return float(np.abs(r).mean())


def inject_anomaly(f: CycleFrame, kind: AnomalyKind | str, rng: np.random.Generator,
                   catalog: ParameterCatalog | None = None, noise: float = 0.05) -> tuple[CycleFrame, AnomalyLabel]:
    """Return a modified copy of ``f`` and its label.

    spike: 3 consecutive ticks of one parameter shifted by 8x its in-cycle
    standard deviation.  drift: a linear ramp reaching +4 sigma at the last
    tick.  stuck_sensor: the row frozen at its first value.
    correlation_break: the row replaced by an unrelated waveform spanning
    the same range.  energy_surge: power and current x1.5, so the energy
    register climbs 1.5x faster within the cycle.
    """
    kind = AnomalyKind(kind)
    catalog = catalog or ParameterCatalog.demo()
    lay = _layout(catalog, noise)
    if f.params != lay.ids:
        raise ValueError("frame does not match the catalog layout")
    g = f.ticks.copy()
    T = f.T
    # only rows that actually vary within the cycle are candidates
    candidates = [i for i in lay.analog if np.ptp(g[i]) > 0]

    if kind is AnomalyKind.ENERGY_SURGE:
        if lay.energy is None:
            raise ParamUnavailable("energy_surge needs an energy register parameter")
        affected = [lay.energy]
        for i in (lay.power, lay.current):
            if i is not None:
                g[i] = _round(g[i] * SURGE_FACTOR, lay.res[i])
                affected.append(i)
        e0 = g[lay.energy, 0]
        g[lay.energy] = _round(e0 + SURGE_FACTOR * (g[lay.energy] - e0), 1e-4)
    else:
        if not candidates:
            raise ParamUnavailable(f"{kind.value} needs a varying analog parameter")
        if kind is AnomalyKind.CORRELATION_BREAK and len(candidates) < 3:
            raise ParamUnavailable("correlation_break needs at least three analog parameters")
        j = int(rng.choice(candidates))
        res = lay.res[j]
        row = g[j]
        sigma = float(row.std())
        if kind is AnomalyKind.SPIKE:
            s = int(rng.integers(1, max(2, T - 3)))
            shift = math.ceil(8 * sigma / res) * res * (1 if rng.random() < 0.5 else -1)
            row[s:s + 3] = _round(row[s:s + 3] + shift, res)
        elif kind is AnomalyKind.DRIFT:
            row[:] = _round(row + 4 * sigma * np.arange(T) / (T - 1), res)
        elif kind is AnomalyKind.STUCK_SENSOR:
            row[:] = row[0]
        else:
            lo, hi = row.min(), row.max()
            u = np.linspace(0.0, 1.0, T)
            for _ in range(50):
                freq = rng.uniform(1.3, 3.7)
                phase = rng.uniform(0, 2 * np.pi)
                wave = np.sin(2 * np.pi * freq * u + phase) + 0.3 * rng.standard_normal(T)
                wave = (wave - wave.min()) / (np.ptp(wave) + 1e-12)
                row[:] = _round(lo + (hi - lo) * wave, res)
                if _pearson_rows(g, j) < 0.3:
                    break
        affected = [j]

    out = CycleFrame(f.cell_id, f.cycle_index, f.start_ts_ms, f.end_ts_ms, f.params, g,
                     _scalars(lay, g), f.stale)
    return out, AnomalyLabel(f.cell_id, f.cycle_index, kind, tuple(lay.ids[i] for i in affected))


def simulate_cycle(cfg: CellConfig, cycle_index: int) -> tuple[CycleFrame, AnomalyLabel | None]:
    """The published frame of one cycle: clean, or with an anomaly at ``anomaly_rate``."""
    f = generate_cycle(cfg, cycle_index)
    rng = _rng(cfg.seed, cfg.cell_id, cycle_index, "anomaly")
    if cycle_index == 0 or not cfg.kinds or rng.random() >= cfg.anomaly_rate:
        return f, None
    kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
    return inject_anomaly(f, kind, rng, cfg.catalog, cfg.noise)


def simulate_cell(cfg: CellConfig, n_cycles: int, first: int = 0) -> Iterator[tuple[CycleFrame, AnomalyLabel | None]]:
    for i in range(first, first + n_cycles):
        yield simulate_cycle(cfg, i)


# --- publishing ------------------------------------------------------------------------


def default_cells(n: int = 10, seed: int = 0, anomaly_rate: float = 0.05,
                  catalog: ParameterCatalog | None = None, **kwargs) -> list[CellConfig]:
    catalog = catalog or ParameterCatalog.demo()
    return [CellConfig(f"cell{i + 1:02d}", catalog, seed=seed, anomaly_rate=anomaly_rate, **kwargs)
            for i in range(n)]


@dataclass
class StreamStats:
    publishes: int = 0
    values: int = 0
    seconds: int = 0
    cycles_started: int = 0
    labels: list[AnomalyLabel] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"publishes": self.publishes, "values": self.values, "seconds": self.seconds,
                "cycles_started": self.cycles_started, "labels": len(self.labels)}


def _cell_seconds(cfg: CellConfig, duration_s: int, stats: StreamStats,
                  start_s: int = 0) -> Iterator[list[tuple[str, bytes]]]:
    """Per second, the (topic, payload) pairs of one cell, in catalog device order.

    Seconds before ``start_s`` yield an empty list (nothing is encoded); the
    labels of their cycles are still collected. Published seconds add their
    publish and value counts to ``stats``.
    """
    lay = _layout(cfg.catalog, cfg.noise)
    devices = cfg.catalog.devices()
    rows = {d: [i for i, s in enumerate(lay.specs) if s.device_class is d] for d in devices}
    specs = {d: [lay.specs[i] for i in rows[d]] for d in devices}
    topics = {d: payload_topic(cfg.cell_id, d) for d in devices}
    sec = 0
    k = 0
    while sec < duration_s:
        T = cycle_length(cfg, k)
        if sec + T <= start_s:
            # whole cycle already published: only its label matters
            _, label = simulate_cycle(cfg, k)
        else:
            f, label = simulate_cycle(cfg, k)
            cols = f.ticks.T.tolist()
        stats.cycles_started += 1
        if label is not None:
            stats.labels.append(label)
        for t in range(T):
            if sec >= duration_s:
                break
            if sec < start_s:
                yield []
            else:
                ts = f.start_ts_ms + 1000 * t
                col = cols[t]
                stats.publishes += len(devices)
                stats.values += len(lay.ids)
                yield [(topics[d], encode_json(payload_dict(cfg.cell_id, d, ts, specs[d],
                                                            [col[r] for r in rows[d]])))
                       for d in devices]
            sec += 1
        k += 1


def stream_payloads(cells: Sequence[CellConfig], duration_s: int, stats: StreamStats | None = None,
                    start_s: int = 0, stop: Callable[[], bool] | None = None) -> Iterator[tuple[str, bytes]]:
    """All payloads of a run, second by second, cells in the given order.

    ``start_s`` resumes an interrupted run; ``stop`` is polled once per second.
    """
    stats = stats if stats is not None else StreamStats()
    gens = [_cell_seconds(c, duration_s, stats, start_s) for c in cells]
    for sec in range(duration_s):
        if stop is not None and stop():
            return
        for g in gens:
            yield from next(g)
        if sec >= start_s:
            stats.seconds += 1


def stream_publish(cells: Sequence[CellConfig], duration_s: int, publish: Callable[[str, bytes], object],
                   realtime: bool = False, start_s: int = 0, stop: Callable[[], bool] | None = None,
                   stats: StreamStats | None = None) -> StreamStats:
    """Push every payload through ``publish``; pace at 1 s per tick when ``realtime``.

    ``publish`` may block (QoS 1 window full); nothing is ever dropped here.
    """
    stats = stats if stats is not None else StreamStats()
    t0 = time.monotonic()
    per_second = sum(len(c.catalog.devices()) for c in cells)
    for n, (topic, payload) in enumerate(stream_payloads(cells, duration_s, stats, start_s, stop)):
        if realtime and n % per_second == 0:
            wait = t0 + n // per_second - time.monotonic()
            if wait > 0:
                time.sleep(wait)
        publish(topic, payload)
    return stats


def write_labels(labels: Sequence[AnomalyLabel], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for lb in sorted(labels, key=lambda x: (x.cell_id, x.cycle_index)):
            fh.write(json.dumps(lb.to_json(), separators=(",", ":")) + "\n")


def read_labels(path) -> list[AnomalyLabel]:
    with open(path, encoding="utf-8") as fh:
        return [AnomalyLabel.from_json(json.loads(line)) for line in fh if line.strip()]

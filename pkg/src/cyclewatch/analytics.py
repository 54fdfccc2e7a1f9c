"""Streaming cycle-quality detectors.

Four detectors run per cell over consecutive CycleFrames:

* ``corr``: deviation of the cycle's Pearson matrix from the mean of the trailing W matrices.
* ``cosine_window``: one minus the mean cosine similarity between the cycle vector and the
  trailing W cycle vectors.
* ``cosine_matrix``: mean absolute deviation of the per-second cosine matrix from the
  trailing mean matrix.
* ``energy``: exponential-smoothing forecast of per-cycle energy with an EWMA residual band.

Each detector is a pure fold over the cell's frames, so online and offline passes agree.
"""

from __future__ import annotations

import enum
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConfigInvalid,
    InsufficientHistory,
    LengthMismatch,
    NonFiniteObservation,
    NoOverlap,
    NotWarmedUp,
)
from .model import CycleFrame, ResampledFrame, resample_frame


class Detector(str, enum.Enum):
    CORR = "corr"
    COSINE_WINDOW = "cosine_window"
    COSINE_MATRIX = "cosine_matrix"
    ENERGY = "energy"

    def __str__(self) -> str:
        return self.value


QUALITY_DETECTORS = (Detector.CORR, Detector.COSINE_WINDOW, Detector.COSINE_MATRIX)


@dataclass(frozen=True)
class AnalyticsConfig:
    W: int = 10
    L: int = 64
    k_mad: float = 5.0
    warmup: int = 20
    z: float = 3.0
    alpha: float = 0.2
    lam: float = 0.1
    sigma_floor: float = 1e-9
    top_k: int = 5
    threshold_window: int = 100
    exclude_flagged: bool = False

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0 or self.alpha == 1.0):
            raise ConfigInvalid(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 < self.lam < 1.0:
            raise ConfigInvalid(f"lambda must be in (0, 1), got {self.lam}")
        if self.W < 2:
            raise ConfigInvalid("W must be >= 2")
        if self.warmup < self.W:
            raise ConfigInvalid("warmup must be >= W")
        if self.L < 2:
            raise ConfigInvalid("L must be >= 2")
        if self.threshold_window < self.warmup:
            raise ConfigInvalid("threshold_window must be >= warmup")
        if self.k_mad <= 0 or self.z <= 0 or self.sigma_floor <= 0 or self.top_k < 1:
            raise ConfigInvalid("k_mad, z, sigma_floor must be positive and top_k >= 1")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


# --- correlation -----------------------------------------------------------


@dataclass(eq=False)
class CorrMatrix:
    params: tuple[str, ...]
    r: np.ndarray
    mask: np.ndarray


def _grid(f) -> np.ndarray:
    return np.asarray(f.grid if isinstance(f, ResampledFrame) else f, dtype=np.float64)


def pearson_matrix(f: ResampledFrame | np.ndarray, params: Sequence[str] | None = None) -> CorrMatrix:
    """Population Pearson correlation between the rows of a P×L grid."""
    X = _grid(f)
    if X.shape[1] < 2:
        raise ValueError("L must be >= 2")
    if params is None:
        params = f.params if isinstance(f, ResampledFrame) else tuple(str(i) for i in range(X.shape[0]))
    L = X.shape[1]
    Xc = X - X.mean(axis=1, keepdims=True)
    sd = np.sqrt((Xc * Xc).sum(axis=1) / L)
    ok = (np.ptp(X, axis=1) > 0) & (sd > 0)  # subnormal spreads can underflow to sd == 0
    sd_safe = np.where(ok, sd, 1.0)
    r = (Xc @ Xc.T) / L / np.outer(sd_safe, sd_safe)
    np.clip(r, -1.0, 1.0, out=r)
    r = 0.5 * (r + r.T)
    mask = np.outer(ok, ok)
    r[~mask] = 0.0
    np.fill_diagonal(r, np.where(ok, 1.0, 0.0))
    return CorrMatrix(tuple(params), r, mask)


def corr_reference(history: Sequence[CorrMatrix]) -> CorrMatrix:
    """Element-wise mean over the history matrices that define each entry."""
    if len(history) < 2:
        raise InsufficientHistory(f"need >= 2 matrices, got {len(history)}")
    masks = np.stack([h.mask for h in history])
    rs = np.stack([np.where(h.mask, h.r, 0.0) for h in history])
    counts = masks.sum(axis=0)
    keep = 2 * counts >= len(history)
    r = np.where(keep, rs.sum(axis=0) / np.maximum(counts, 1), 0.0)
    return CorrMatrix(history[0].params, r, keep)


def _pair_name(params: Sequence[str], i: int, j: int) -> str:
    return f"{params[i]}|{params[j]}"


def _top(names: Sequence[str], values: np.ndarray, k: int) -> list[tuple[str, float]]:
    order = np.argsort(-values, kind="stable")[:k]
    return [(names[i], float(values[i])) for i in order]


def corr_deviation(c: CorrMatrix, ref: CorrMatrix, top_k: int = 5) -> tuple[float, list[tuple[str, float]]]:
    """RMS deviation over the upper-triangle entries defined in the reference.

    Entries defined in the reference but masked in ``c`` contribute ``|ref|``.
    """
    if c.params != ref.params:
        raise ValueError("parameter ordering differs")
    iu, ju = np.triu_indices(len(c.params), k=1)
    ref_ok = ref.mask[iu, ju]
    c_ok = c.mask[iu, ju]
    diff = np.where(c_ok, np.abs(c.r[iu, ju] - ref.r[iu, ju]), np.abs(ref.r[iu, ju]))
    diff = diff[ref_ok]
    if diff.size == 0:
        raise NoOverlap("no defined correlation entries to compare")
    score = math.sqrt(float(np.sum(diff * diff)) / diff.size)
    names = [_pair_name(c.params, i, j) for i, j in zip(iu[ref_ok], ju[ref_ok])]
    return score, _top(names, diff, top_k)


# --- cosine similarity -----------------------------------------------------


@dataclass(eq=False)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, history: Sequence[ResampledFrame | np.ndarray], sigma_floor: float = 1e-9) -> "Standardizer":
        """Per-parameter pooled population moments over the history grids."""
        if not history:
            raise NotWarmedUp("standardizer needs at least one frame")
        stack = np.concatenate([_grid(h) for h in history], axis=1)
        mean = stack.mean(axis=1)
        std = np.sqrt(((stack - mean[:, None]) ** 2).mean(axis=1))
        return cls(mean, np.maximum(std, sigma_floor))

    def apply(self, f: ResampledFrame | np.ndarray) -> np.ndarray:
        return (_grid(f) - self.mean[:, None]) / self.std[:, None]


def cycle_vector(f: ResampledFrame | np.ndarray, standardizer: Standardizer | None) -> np.ndarray:
    """Z-scored grid flattened param-major: [p0t0, p0t1, ..., p1t0, ...]."""
    if standardizer is None:
        raise NotWarmedUp("no trailing statistics yet")
    return standardizer.apply(f).reshape(-1)


def cosine_similarity(a, b, sigma_floor: float = 1e-9, return_flag: bool = False):
    """Cosine of the angle between a and b. Near-zero vectors give 0 (flagged degenerate)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise LengthMismatch(f"lengths {a.size} and {b.size} differ")
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na < sigma_floor or nb < sigma_floor:
        return (0.0, True) if return_flag else 0.0
    v = min(1.0, max(-1.0, float(a @ b) / (na * nb)))
    return (v, False) if return_flag else v


def trailing_similarity(current: np.ndarray, history: Sequence[np.ndarray], W: int | None = None,
                        sigma_floor: float = 1e-9) -> tuple[float, list[float]]:
    """Score = 1 - mean cosine to each trailing vector."""
    if not history or (W is not None and len(history) < W):
        raise NotWarmedUp(f"need {W or 1} trailing vectors, got {len(history)}")
    sims = [cosine_similarity(current, h, sigma_floor) for h in history]
    return 1.0 - float(np.mean(sims)), sims


def cosine_matrix(z: ResampledFrame | np.ndarray, sigma_floor: float = 1e-9) -> np.ndarray:
    """L×L cosine similarities between the per-second columns of a standardized grid."""
    Z = _grid(z)
    if Z.shape[0] < 2:
        raise ValueError("P must be >= 2")
    norms = np.sqrt((Z * Z).sum(axis=0))
    ok = norms >= sigma_floor
    safe = np.where(ok, norms, 1.0)
    M = (Z.T @ Z) / np.outer(safe, safe)
    np.clip(M, -1.0, 1.0, out=M)
    M = 0.5 * (M + M.T)
    M[~np.outer(ok, ok)] = 0.0
    np.fill_diagonal(M, np.where(ok, 1.0, 0.0))
    return M


def cosmat_reference(history: Sequence[np.ndarray]) -> np.ndarray:
    if len(history) < 1:
        raise InsufficientHistory("need at least one trailing matrix")
    return np.mean(np.stack(history), axis=0)


def cosmat_deviation(M: np.ndarray, ref: np.ndarray | Sequence[np.ndarray]) -> float:
    """Mean absolute deviation over the strict upper triangle."""
    if not isinstance(ref, np.ndarray) or ref.ndim == 3:
        ref = cosmat_reference(ref)
    if M.shape != ref.shape:
        raise LengthMismatch(f"matrix shapes {M.shape} and {ref.shape} differ")
    iu = np.triu_indices(M.shape[0], k=1)
    return float(np.mean(np.abs(M[iu] - ref[iu])))


def block_contributors(Z: np.ndarray, Zref: np.ndarray, params: Sequence[str], top_k: int) -> list[tuple[str, float]]:
    """Per-parameter L2 norm of the standardized difference from the trailing mean grid."""
    norms = np.sqrt(((Z - Zref) ** 2).sum(axis=1))
    return _top(params, norms, top_k)


# --- energy forecast -------------------------------------------------------


@dataclass(frozen=True)
class ForecastState:
    level: float = 0.0
    resid_var: float = 0.0
    n_seen: int = 0

    def __post_init__(self):
        if self.resid_var < 0:
            raise ValueError("resid_var must be >= 0")


@dataclass(frozen=True)
class ForecastStep:
    forecast: float
    lo: float
    hi: float
    flagged: bool
    state: ForecastState


def forecast_step(st: ForecastState, observed: float, cfg: AnalyticsConfig = AnalyticsConfig()) -> ForecastStep:
    """Simple exponential smoothing with an EWMA residual-variance band."""
    observed = float(observed)
    if not math.isfinite(observed):
        raise NonFiniteObservation(f"observation {observed!r} is not finite")
    if st.n_seen == 0:
        return ForecastStep(observed, observed, observed, False, ForecastState(observed, 0.0, 1))
    forecast = st.level
    half = cfg.z * max(math.sqrt(st.resid_var), cfg.sigma_floor)
    lo, hi = forecast - half, forecast + half
    flagged = st.n_seen >= cfg.warmup and not (lo <= observed <= hi)
    resid = observed - forecast
    nxt = ForecastState(
        forecast + cfg.alpha * resid,
        (1.0 - cfg.lam) * st.resid_var + cfg.lam * resid * resid,
        st.n_seen + 1,
    )
    return ForecastStep(forecast, lo, hi, flagged, nxt)


# --- thresholds ------------------------------------------------------------


def robust_threshold(scores: Sequence[float], cfg: AnalyticsConfig = AnalyticsConfig()) -> float:
    """median + k_mad * max(MAD, sigma_floor)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size < cfg.warmup:
        raise NotWarmedUp(f"need {cfg.warmup} trailing scores, got {s.size}")
    med = float(np.median(s))
    mad = float(np.median(np.abs(s - med)))
    return med + cfg.k_mad * max(mad, cfg.sigma_floor)


# --- reports ---------------------------------------------------------------


@dataclass
class AnomalyReport:
    cell_id: str
    cycle_index: int
    detector: Detector
    score: float
    threshold: float
    flagged: bool
    contributors: list[tuple[str, float]] = field(default_factory=list)
    extra: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.detector = Detector(self.detector)

    def to_dict(self) -> dict:
        d = {
            "cell": self.cell_id,
            "cycle": self.cycle_index,
            "detector": self.detector.value,
            "score": self.score,
            "threshold": self.threshold,
            "flagged": self.flagged,
            "contributors": [[k, v] for k, v in self.contributors],
        }
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"), allow_nan=False)

    @classmethod
    def from_json(cls, line: str) -> "AnomalyReport":
        d = json.loads(line)
        core = {"cell", "cycle", "detector", "score", "threshold", "flagged", "contributors"}
        return cls(d["cell"], d["cycle"], Detector(d["detector"]), d["score"], d["threshold"], d["flagged"],
                   [(k, v) for k, v in d["contributors"]], {k: v for k, v in d.items() if k not in core})

    @property
    def sort_key(self) -> tuple:
        return (self.cell_id, self.cycle_index, list(Detector).index(self.detector))


# --- per-cell fold ---------------------------------------------------------


@dataclass(eq=False)
class _Past:
    grid: np.ndarray
    corr: CorrMatrix


class CellDetector:
    """All four detectors for one cell, folded over its frames in cycle order.

    Quality scores exist once W frames are in the history; reports are emitted once
    ``warmup`` scores have accumulated for the threshold. The energy detector reports
    from the ``warmup``-th observation on.
    """

    def __init__(self, cell_id: str, cfg: AnalyticsConfig = AnalyticsConfig()):
        self.cell_id = cell_id
        self.cfg = cfg
        self.history: deque[_Past] = deque(maxlen=cfg.W)
        self.scores: dict[Detector, deque[float]] = {
            d: deque(maxlen=cfg.threshold_window) for d in QUALITY_DETECTORS
        }
        self.energy_resid: deque[float] = deque(maxlen=cfg.threshold_window)
        self.forecast = ForecastState()
        self.last_cycle: int | None = None
        self.params: tuple[str, ...] | None = None

    def step(self, frame: CycleFrame) -> list[AnomalyReport]:
        if frame.cell_id != self.cell_id:
            raise ValueError(f"frame for {frame.cell_id} fed to detector for {self.cell_id}")
        if self.last_cycle is not None and frame.cycle_index <= self.last_cycle:
            raise ValueError(f"cycle {frame.cycle_index} not after {self.last_cycle}")
        self.last_cycle = frame.cycle_index
        if frame.stale:
            return []
        if self.params is None:
            self.params = frame.params
        elif frame.params != self.params:
            raise ValueError("parameter ordering changed mid-stream")
        cfg = self.cfg
        rf = resample_frame(frame, cfg.L)
        corr = pearson_matrix(rf)
        reports: list[AnomalyReport] = []
        any_flag = False

        if len(self.history) >= cfg.W:
            past = list(self.history)
            for det, score, contrib in self._quality_scores(rf, corr, past):
                trail = self.scores[det]
                if len(trail) >= cfg.warmup:
                    thr = robust_threshold(trail, cfg)
                    flagged = score > thr
                    any_flag |= flagged
                    reports.append(AnomalyReport(self.cell_id, frame.cycle_index, det, score, thr, flagged, contrib))
                trail.append(score)

        energy = frame.scalars.get("energy_kwh")
        if energy is not None:
            reports.append(self.energy_step(frame.cycle_index, energy))

        if not (cfg.exclude_flagged and any_flag):
            self.history.append(_Past(rf.grid, corr))
        return [r for r in reports if r is not None]

    def _quality_scores(self, rf: ResampledFrame, corr: CorrMatrix, past: list[_Past]):
        cfg = self.cfg
        try:
            score, contrib = corr_deviation(corr, corr_reference([p.corr for p in past]), cfg.top_k)
            yield Detector.CORR, score, contrib
        except NoOverlap:
            pass
        std = Standardizer.fit([p.grid for p in past], cfg.sigma_floor)
        Z = std.apply(rf.grid)
        Zp = [std.apply(p.grid) for p in past]
        Zref = np.mean(np.stack(Zp), axis=0)
        contrib = block_contributors(Z, Zref, rf.params, cfg.top_k)
        score, _ = trailing_similarity(Z.reshape(-1), [z.reshape(-1) for z in Zp], cfg.W, cfg.sigma_floor)
        yield Detector.COSINE_WINDOW, score, contrib
        M = cosine_matrix(Z, cfg.sigma_floor)
        ref = cosmat_reference([cosine_matrix(z, cfg.sigma_floor) for z in Zp])
        yield Detector.COSINE_MATRIX, cosmat_deviation(M, ref), contrib

    def energy_step(self, cycle_index: int, observed: float) -> AnomalyReport | None:
        """Advance only the energy forecaster; None while it is warming up."""
        cfg = self.cfg
        step = forecast_step(self.forecast, observed, cfg)
        warm = self.forecast.n_seen >= cfg.warmup
        self.forecast = step.state
        if not warm:
            return None
        half = step.hi - step.forecast
        resid = abs(observed - step.forecast)
        return AnomalyReport(
            self.cell_id, cycle_index, Detector.ENERGY, resid, half, resid > half,
            [("en.energy_kwh", resid)],
            {"observed": float(observed), "forecast": step.forecast, "lo": step.lo, "hi": step.hi},
        )


class Analyzer:
    """Routes frames to per-cell detectors. Cells never share state."""

    def __init__(self, cfg: AnalyticsConfig = AnalyticsConfig()):
        self.cfg = cfg
        self.cells: dict[str, CellDetector] = {}

    def step(self, frame: CycleFrame) -> list[AnomalyReport]:
        det = self.cells.get(frame.cell_id)
        if det is None:
            det = self.cells[frame.cell_id] = CellDetector(frame.cell_id, self.cfg)
        return det.step(frame)


def analyze_frames(frames: Iterable[CycleFrame], cfg: AnalyticsConfig = AnalyticsConfig()) -> list[AnomalyReport]:
    """Batch pass. Output is ordered by (cell, cycle, detector)."""
    az = Analyzer(cfg)
    out: list[AnomalyReport] = []
    for f in sorted(frames, key=lambda f: (f.cell_id, f.cycle_index)):
        out.extend(az.step(f))
    return sorted(out, key=lambda r: r.sort_key)


def reports_ndjson(reports: Iterable[AnomalyReport]) -> bytes:
    ordered = sorted(reports, key=lambda r: r.sort_key)
    return b"".join(r.to_json().encode() + b"\n" for r in ordered)


def flagged_cycles(reports: Iterable[AnomalyReport], detectors=QUALITY_DETECTORS) -> set[tuple[str, int]]:
    dets = {Detector(d) for d in detectors}
    return {(r.cell_id, r.cycle_index) for r in reports if r.flagged and r.detector in dets}

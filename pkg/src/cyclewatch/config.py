"""Run configuration: ``key = value`` files with ``#`` comments, overridable by CLI flags."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .analytics import AnalyticsConfig
from .errors import ConfigInvalid

ROOT_ENV = "CYCLEWATCH_ROOT"


def default_root() -> Path:
    return Path(os.environ.get(ROOT_ENV, "./cyclewatch-data"))


@dataclass(frozen=True)
class RunConfig:
    root: Path = field(default_factory=default_root)
    broker: str = "127.0.0.1:0"        # port 0 picks a free port
    topics_root: str = "flatform"
    store: Path | None = None          # defaults below are relative to root
    log_root: Path | None = None
    reports: Path | None = None
    labels: Path | None = None
    manifest: Path | None = None
    cells: int = 10
    seed: int = 0
    anomaly_rate: float = 0.05
    duration_s: int = 3600
    realtime: bool = False
    segment_bytes: int = 64 * 1024 * 1024
    retention_bytes: int | None = None
    store_group_cycles: int = 64       # cycles per cell buffered into one row group
    store_flush_s: float = 900.0       # ...or fewer, once the oldest has waited this long
    analytics: AnalyticsConfig = field(default_factory=AnalyticsConfig)

    def __post_init__(self):
        root = Path(self.root)
        object.__setattr__(self, "root", root)
        defaults = {"store": "store.ccf", "log_root": "log", "reports": "reports.ndjson",
                    "labels": "labels.ndjson", "manifest": "manifest.json"}
        for name, rel in defaults.items():
            v = getattr(self, name)
            object.__setattr__(self, name, root / rel if v is None else Path(v))
        if self.cells < 1:
            raise ConfigInvalid("cells must be >= 1")
        if self.duration_s < 1:
            raise ConfigInvalid("duration_s must be >= 1")
        if not 1 <= self.store_group_cycles <= 256:
            raise ConfigInvalid("store_group_cycles must be in [1, 256]")
        if self.store_flush_s <= 0:
            raise ConfigInvalid("store_flush_s must be positive")
        if not 0.0 <= self.anomaly_rate < 0.5:
            raise ConfigInvalid("anomaly_rate must be in [0, 0.5)")
        paths = [self.store, self.log_root, self.reports, self.labels, self.manifest]
        if len({p.resolve() for p in paths}) != len(paths):
            raise ConfigInvalid("store, log_root, reports, labels and manifest paths must be distinct")
        self.broker_address  # validates

    @property
    def broker_address(self) -> tuple[str, int]:
        host, sep, port = self.broker.rpartition(":")
        if not sep or not host:
            raise ConfigInvalid(f"broker must be host:port, got {self.broker!r}")
        try:
            p = int(port)
        except ValueError:
            raise ConfigInvalid(f"bad broker port {port!r}") from None
        if not 0 <= p <= 65535:
            raise ConfigInvalid(f"bad broker port {p}")
        return host, p

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "analytics":
                d.update(v.as_dict())
            else:
                d[f.name] = str(v) if isinstance(v, Path) else v
        return d


_ANALYTICS_KEYS = {f.name for f in fields(AnalyticsConfig)} | {"lambda"}
_RUN_KEYS = {f.name for f in fields(RunConfig)} - {"analytics"}


def _coerce(raw: str, typ) -> object:
    typ = str(typ)
    if "bool" in typ:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if "None" in typ and raw.strip().lower() in ("", "none"):
        return None
    if "int" in typ and "Path" not in typ:
        return int(raw)
    if "float" in typ:
        return float(raw)
    return raw.strip()


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines. Blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigInvalid(f"line {n}: expected 'key = value'")
        key = key.strip()
        if key not in _RUN_KEYS and key not in _ANALYTICS_KEYS:
            raise ConfigInvalid(f"line {n}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def build_config(values: dict[str, object]) -> RunConfig:
    """RunConfig from string or typed values; unknown keys raise ConfigInvalid."""
    run_types = {f.name: f.type for f in fields(RunConfig)}
    an_types = {f.name: f.type for f in fields(AnalyticsConfig)}
    run_kw, an_kw = {}, {}
    try:
        for key, v in values.items():
            if v is None:
                continue
            if key in _RUN_KEYS:
                run_kw[key] = _coerce(v, run_types[key]) if isinstance(v, str) else v
            elif key in _ANALYTICS_KEYS:
                name = "lam" if key == "lambda" else key
                an_kw[name] = _coerce(v, an_types[name]) if isinstance(v, str) else v
            else:
                raise ConfigInvalid(f"unknown key {key!r}")
        return RunConfig(analytics=AnalyticsConfig(**an_kw), **run_kw)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigInvalid):
            raise
        raise ConfigInvalid(str(exc)) from exc


def load_config(path: str | Path | None = None, overrides: dict[str, object] | None = None) -> RunConfig:
    values: dict[str, object] = {}
    if path is not None:
        try:
            values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(values)


def replace(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)

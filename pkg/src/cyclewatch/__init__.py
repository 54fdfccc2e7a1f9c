"""cyclewatch: injection-molding cell telemetry pipeline and cycle anomaly detectors."""

__version__ = "0.1.0"

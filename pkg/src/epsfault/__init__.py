"""Physics-informed Real NVP fault detection for power-system telemetry."""

__version__ = "0.1.0"

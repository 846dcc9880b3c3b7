"""Synthetic EPS telemetry with controllable fault injection.

Channel roles mirror the testbed constraints: a battery-bus voltage pair
across a closed breaker, two currents on open branches, two inverter output
voltages and two inverter frequencies. Nominal data satisfies every
physics-loss constraint exactly when ``noise_std`` is zero.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .data import Frame, WindowBatch, write_csv, write_labels
from .exceptions import ConfigError
from .physics import CircuitTopology

FAULT_KINDS = ("stuck_sensor", "offset_bias", "breaker_trip", "inverter_drift", "noise_burst")

ROLE_FIELDS = ("voltage_pair", "open_currents", "inverter_voltage", "inverter_frequency")


@dataclass
class SynthConfig:
    voltage_pair: tuple[str, str] = ("E135", "E140")
    open_currents: tuple[str, str] = ("IT167", "IT267")
    inverter_voltage: tuple[str, str] = ("E165", "E265")
    inverter_frequency: tuple[str, str] = ("ST165", "ST265")
    sample_rate: float = 1.0
    duration: int = 1000
    noise_std: float | dict = field(default_factory=lambda: {
        "voltage_pair": 0.1, "open_currents": 0.05, "inverter_voltage": 0.5, "inverter_frequency": 0.1})
    bus_voltage: float = 24.0
    load_amplitude: float = 0.1
    load_period: float = 200.0
    v_target: float = 120.5
    f_target: float = 60.0
    seed: int = 0

    def __post_init__(self):
        for name in ROLE_FIELDS:
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    @property
    def columns(self) -> list[str]:
        return [c for role in ROLE_FIELDS for c in getattr(self, role)]

    def role_of(self, channel: str) -> str:
        for role in ROLE_FIELDS:
            if channel in getattr(self, role):
                return role
        raise ConfigError(f"unknown channel {channel!r}")

    def sigma(self, channel: str) -> float:
        if isinstance(self.noise_std, dict):
            if channel in self.noise_std:
                return float(self.noise_std[channel])
            return float(self.noise_std.get(self.role_of(channel), 0.0))
        return float(self.noise_std)

    def validate(self) -> None:
        seen = set()
        for role in ROLE_FIELDS:
            chans = getattr(self, role)
            if len(chans) != 2 or not all(isinstance(c, str) and c for c in chans):
                raise ConfigError(f"{role}: expected two channel names, got {list(chans)!r}")
            for c in chans:
                if c in seen:
                    raise ConfigError(f"{role}: channel {c!r} assigned to more than one role")
                seen.add(c)
        if self.duration < 1:
            raise ConfigError("duration: must be >= 1 sample")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate: must be positive")
        if self.load_period <= 0:
            raise ConfigError("load_period: must be positive")
        stds = self.noise_std.values() if isinstance(self.noise_std, dict) else [self.noise_std]
        if isinstance(self.noise_std, dict):
            for k in self.noise_std:
                if k not in ROLE_FIELDS and k not in seen:
                    raise ConfigError(f"noise_std: unknown channel or role {k!r}")
        if any(float(s) < 0 for s in stds):
            raise ConfigError("noise_std: must be >= 0")

    def topology(self) -> CircuitTopology:
        return CircuitTopology(
            columns=self.columns,
            voltage_pairs=[self.voltage_pair],
            open_circuit_currents=list(self.open_currents),
            inverter_voltage=list(self.inverter_voltage),
            inverter_frequency=list(self.inverter_frequency),
            v_target=self.v_target, f_target=self.f_target, name="synth",
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for role in ROLE_FIELDS:
            d[role] = list(d[role])
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "SynthConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_synth_config(path: str | Path) -> tuple[SynthConfig, dict]:
    """Read a synth YAML file: generator fields plus an optional ``dataset`` block."""
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read synth config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("synth config must be a mapping")
    dataset = raw.pop("dataset", {}) or {}
    return SynthConfig.from_dict(raw), dataset


def simulate_nominal(config: SynthConfig, name: str = "nominal", seed: int | None = None) -> Frame:
    """Nominal telemetry: sinusoidal load on the bus pair, everything else at
    its setpoint, plus independent Gaussian noise per channel."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    n = config.duration
    t = np.arange(n) / config.sample_rate
    phase = rng.uniform(0.0, 2.0 * np.pi)
    bus = config.bus_voltage + config.load_amplitude * np.sin(2.0 * np.pi * np.arange(n) / config.load_period + phase)
    base = {
        "voltage_pair": bus,
        "open_currents": np.zeros(n),
        "inverter_voltage": np.full(n, config.v_target),
        "inverter_frequency": np.full(n, config.f_target),
    }
    cols, values = [], []
    for role in ROLE_FIELDS:
        for c in getattr(config, role):
            sigma = config.sigma(c)
            noise = rng.standard_normal(n) * sigma if sigma > 0 else 0.0
            cols.append(c)
            values.append(base[role] + noise)
    return Frame(name=name, timestamps=t, columns=cols, values=np.column_stack(values))


@dataclass
class FaultScenario:
    kind: str
    channel: str
    onset: int
    magnitude: float
    ramp: int = 20
    seed: int = 0

    def validate(self, frame: Frame | None = None) -> None:
        if self.kind not in FAULT_KINDS:
            raise ConfigError(f"kind: unknown fault kind {self.kind!r}; expected one of {FAULT_KINDS}")
        if not self.magnitude > 0:
            raise ConfigError(f"magnitude: must be > 0, got {self.magnitude}")
        if self.kind == "noise_burst" and self.magnitude <= 1:
            raise ConfigError("magnitude: noise_burst multiplies sigma and must exceed 1")
        if self.ramp < 1:
            raise ConfigError("ramp: must be >= 1")
        if frame is not None:
            if self.channel not in frame.columns:
                raise ConfigError(f"channel: unknown channel {self.channel!r}")
            lo = 1 if self.kind == "stuck_sensor" else 0
            if not lo <= self.onset < frame.n_rows:
                raise ConfigError(f"onset: {self.onset} outside [{lo}, {frame.n_rows})")


def load_scenarios(path: str | Path) -> list[FaultScenario]:
    raw = yaml.safe_load(Path(path).read_text()) or []
    if isinstance(raw, dict):
        raw = raw.get("scenarios", [])
    try:
        return [FaultScenario(**r) for r in raw]
    except TypeError as exc:
        raise ConfigError(f"bad scenario entry: {exc}") from None


def _noise_sigma(frame: Frame, channel: str, onset: int, config: SynthConfig | None) -> float:
    if config is not None:
        return config.sigma(channel)
    pre = frame.column(channel)[:onset]
    return float(np.std(np.diff(pre)) / np.sqrt(2.0)) if len(pre) > 2 else 0.0


def inject_fault(frame: Frame, scenario: FaultScenario, config: SynthConfig | None = None) -> Frame:
    """Return a copy of ``frame`` with the fault applied from ``onset`` on.

    ``config`` supplies the channel noise level for ``noise_burst``; without
    it the level is estimated from pre-onset first differences.
    """
    scenario.validate(frame)
    out = frame.copy()
    j = out.columns.index(scenario.channel)
    x = out.values[:, j]
    on, mag = scenario.onset, float(scenario.magnitude)
    n_post = len(x) - on
    if scenario.kind == "stuck_sensor":
        x[on:] = x[on - 1]
    elif scenario.kind == "offset_bias":
        x[on:] += mag
    elif scenario.kind == "breaker_trip":
        x[on:] -= mag
    elif scenario.kind == "inverter_drift":
        x[on:] += mag * np.minimum(np.arange(1, n_post + 1) / scenario.ramp, 1.0)
    elif scenario.kind == "noise_burst":
        sigma = _noise_sigma(frame, scenario.channel, on, config)
        rng = np.random.default_rng(scenario.seed)
        x[on:] += rng.standard_normal(n_post) * sigma * np.sqrt(mag ** 2 - 1.0)
    out.labels[on:] = 1
    out.fault_channels[on:] = scenario.channel
    return out


def default_fault_channel(config: SynthConfig, kind: str, rng: np.random.Generator) -> str:
    if kind == "breaker_trip":
        pool = config.voltage_pair
    elif kind == "inverter_drift":
        pool = config.inverter_voltage + config.inverter_frequency
    elif kind == "stuck_sensor":
        pool = config.voltage_pair
    else:
        pool = tuple(config.columns)
    return pool[rng.integers(len(pool))]


def generate_experiments(
    config: SynthConfig,
    n_experiments: int = 20,
    fault_fraction: float = 0.5,
    kinds: Sequence[str] = ("offset_bias", "breaker_trip", "inverter_drift", "noise_burst"),
    magnitude_sigma: float | tuple[float, float] = (3.0, 6.0),
    onset_range: tuple[float, float] = (0.3, 0.6),
) -> tuple[list[Frame], list[dict]]:
    """A labelled experiment set: ``fault_fraction`` of runs get one fault.

    Magnitudes are drawn in units of the target channel's noise sigma (for
    ``noise_burst`` the draw is the sigma multiplier itself).
    """
    for k in kinds:
        if k not in FAULT_KINDS:
            raise ConfigError(f"kinds: unknown fault kind {k!r}")
    lo_m, hi_m = (magnitude_sigma, magnitude_sigma) if np.isscalar(magnitude_sigma) else magnitude_sigma
    rng = np.random.default_rng([config.seed, 7919])
    n_fault = int(round(fault_fraction * n_experiments))
    faulty = set(rng.permutation(n_experiments)[:n_fault].tolist())
    frames, labels = [], []
    for i in range(n_experiments):
        name = f"exp{i:03d}"
        frame = simulate_nominal(config, name=name, seed=int(rng.integers(2 ** 31)))
        if i in faulty:
            kind = kinds[rng.integers(len(kinds))]
            channel = default_fault_channel(config, kind, rng)
            m = float(rng.uniform(lo_m, hi_m))
            magnitude = m if kind == "noise_burst" else m * max(config.sigma(channel), 1e-12)
            onset = int(rng.integers(int(onset_range[0] * config.duration), int(onset_range[1] * config.duration)))
            scenario = FaultScenario(kind, channel, max(onset, 1), magnitude, seed=int(rng.integers(2 ** 31)))
            frame = inject_fault(frame, scenario, config)
            labels.append({"file": name, "start": float(frame.timestamps[scenario.onset]), "end": "",
                           "channel": channel, "kind": kind})
        frames.append(frame)
    return frames, labels


def write_experiments(frames: Sequence[Frame], labels: list[dict], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for f in frames:
        p = out_dir / f"{f.name}.csv"
        write_csv(f, p)
        paths.append(p)
    write_labels(labels, out_dir / "labels.csv")
    paths.append(out_dir / "labels.csv")
    return paths


def trivial_detector_scores(train: WindowBatch, test: WindowBatch) -> np.ndarray:
    """Hand-crafted anomaly statistic: the largest standardized deviation of a
    window's per-channel mean or log standard deviation from nominal."""
    def stats(w: WindowBatch):
        seq = w.sequences
        return seq.mean(axis=1), np.log(seq.std(axis=1) + 1e-12)

    m_tr, s_tr = stats(train)
    m_te, s_te = stats(test)
    z_mean = np.abs(m_te - m_tr.mean(0)) / (m_tr.std(0) + 1e-12)
    z_std = np.abs(s_te - s_tr.mean(0)) / (s_tr.std(0) + 1e-12)
    return np.maximum(z_mean.max(axis=1), z_std.max(axis=1))

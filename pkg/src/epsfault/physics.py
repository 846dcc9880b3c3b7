"""Circuit-derived constraint loss for generated or reconstructed windows.

The loss has five terms, each a mean over batch and time:

* ``d_squared``  squared distance of every value to the unit interval,
* ``e``          squared difference of voltage pairs joined by a closed breaker,
* ``it``         squared open-circuit currents,
* ``E65``        absolute deviation of the two inverter voltages from ``v``,
* ``ST65``       absolute deviation of the two inverter frequencies from ``f``.

Windows are flattened time-major: index ``t * n_features + c`` holds channel
``c`` at step ``t``. Physical targets are mapped through the fitted channel
scaler when one is given, so they live in the same units as the data.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .exceptions import ConfigError

BUNDLED_TOPOLOGIES = ("adapt", "synth")


@dataclass
class CircuitTopology:
    columns: list[str]
    voltage_pairs: list[tuple[str, str]] = field(default_factory=list)
    open_circuit_currents: list[str] = field(default_factory=list)
    inverter_voltage: list[str] = field(default_factory=list)
    inverter_frequency: list[str] = field(default_factory=list)
    v_target: float = 120.5
    f_target: float = 60.0
    name: str = ""

    def __post_init__(self):
        self.columns = [str(c) for c in self.columns]
        self.voltage_pairs = [tuple(p) for p in self.voltage_pairs]
        self.validate()

    @property
    def n_features(self) -> int:
        return len(self.columns)

    def index(self, channel: str) -> int:
        try:
            return self.columns.index(channel)
        except ValueError:
            raise ConfigError(f"topology: unknown channel {channel!r}") from None

    def validate(self) -> None:
        if not self.columns:
            raise ConfigError("topology: 'columns' must list at least one channel")
        if len(set(self.columns)) != len(self.columns):
            raise ConfigError("topology: duplicate names in 'columns'")
        known = set(self.columns)
        for pair in self.voltage_pairs:
            if len(pair) != 2:
                raise ConfigError(f"topology: voltage pair {pair!r} must have two channels")
        refs = {
            "voltage_pairs": [c for p in self.voltage_pairs for c in p],
            "open_circuit_currents": self.open_circuit_currents,
            "inverter_voltage": self.inverter_voltage,
            "inverter_frequency": self.inverter_frequency,
        }
        for section, chans in refs.items():
            for c in chans:
                if c not in known:
                    raise ConfigError(f"topology: {section} references unknown channel {c!r}")
        for section in ("inverter_voltage", "inverter_frequency"):
            n = len(getattr(self, section))
            if n not in (0, 2):
                raise ConfigError(f"topology: {section} must name exactly two channels, got {n}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "columns": list(self.columns),
            "voltage_pairs": [list(p) for p in self.voltage_pairs],
            "open_circuit_currents": list(self.open_circuit_currents),
            "inverter_voltage": list(self.inverter_voltage),
            "inverter_frequency": list(self.inverter_frequency),
            "targets": {"v": self.v_target, "f": self.f_target},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CircuitTopology":
        if not isinstance(d, dict) or "columns" not in d:
            raise ConfigError("topology: missing 'columns' section")
        targets = d.get("targets") or {}
        unknown = set(d) - {"name", "columns", "voltage_pairs", "open_circuit_currents",
                            "inverter_voltage", "inverter_frequency", "targets"}
        if unknown:
            raise ConfigError(f"topology: unknown sections {sorted(unknown)}")
        return cls(
            columns=list(d["columns"]),
            voltage_pairs=[tuple(p) for p in d.get("voltage_pairs") or []],
            open_circuit_currents=list(d.get("open_circuit_currents") or []),
            inverter_voltage=list(d.get("inverter_voltage") or []),
            inverter_frequency=list(d.get("inverter_frequency") or []),
            v_target=float(targets.get("v", 120.5)),
            f_target=float(targets.get("f", 60.0)),
            name=str(d.get("name", "")),
        )

    def reordered(self, columns: list[str]) -> "CircuitTopology":
        if sorted(columns) != sorted(self.columns):
            raise ConfigError("topology: reorder must be a permutation of the columns")
        d = self.to_dict()
        d["columns"] = list(columns)
        return CircuitTopology.from_dict(d)


def load_topology(path_or_name: str | Path) -> CircuitTopology:
    """Read a topology file, or a bundled one by name (``adapt`` / ``synth``)."""
    name = str(path_or_name)
    if name in BUNDLED_TOPOLOGIES:
        text = resources.files("epsfault.topologies").joinpath(f"{name}.topology").read_text()
    else:
        path = Path(path_or_name)
        if not path.exists():
            raise ConfigError(f"topology file not found: {path}")
        text = path.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"topology: cannot parse {name}: {exc}") from None
    return CircuitTopology.from_dict(data)


def save_topology(topology: CircuitTopology, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(topology.to_dict(), sort_keys=False))


class SignalView:
    """``[batch, past_length, features]`` view of a flattened window batch."""

    def __init__(self, O, topology: CircuitTopology, past_length: int | None = None):
        O = ad.as_tensor(O)
        F = topology.n_features
        if O.ndim != 2:
            raise ShapeError(f"signal view: expected [batch, width], got {O.shape}")
        if past_length is None:
            if O.shape[1] % F:
                raise ShapeError(f"signal view: width {O.shape[1]} is not a multiple of {F} features")
            past_length = O.shape[1] // F
        if O.shape[1] != F * past_length:
            raise ShapeError(
                f"signal view: width {O.shape[1]} != {F} features x past_length {past_length}")
        self.topology = topology
        self.past_length = past_length
        self.cube = O.reshape(O.shape[0], past_length, F)

    def channels(self, names) -> Tensor:
        """``[batch, past_length, len(names)]`` for the named channels."""
        idx = [self.topology.index(n) for n in names]
        return self.cube[:, :, idx]


def _scaling(scaler, names) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel ``(min, scale)`` or identity when no scaler is given."""
    if scaler is None:
        return np.zeros(len(names)), np.ones(len(names))
    cols = list(scaler.columns_)
    try:
        idx = [cols.index(n) for n in names]
    except ValueError as exc:
        raise ConfigError(f"scaler does not cover channel: {exc}") from None
    return np.asarray(scaler.min_)[idx], np.asarray(scaler.scale_)[idx]


def scaled_targets(value: float, names, scaler=None) -> np.ndarray:
    lo, sc = _scaling(scaler, names)
    return (value - lo) / sc


def d_squared(O) -> Tensor:
    O = ad.as_tensor(O)
    return ad.mean(ad.square(ad.hinge_above(O, 1.0)) + ad.square(ad.hinge_below(O, 0.0)))


def pair_equality(view: SignalView, topology: CircuitTopology, scaler=None) -> Tensor:
    """Term ``e``. With a scaler, each pair is compared in raw units divided
    by the pair's mean range, which equals the plain scaled difference when
    both channels share one scaling."""
    if not topology.voltage_pairs:
        return Tensor(0.0)
    left = [p[0] for p in topology.voltage_pairs]
    right = [p[1] for p in topology.voltage_pairs]
    a, b = view.channels(left), view.channels(right)
    if scaler is None:
        diff = a - b
    else:
        lo_a, sc_a = _scaling(scaler, left)
        lo_b, sc_b = _scaling(scaler, right)
        r = 0.5 * (sc_a + sc_b)
        diff = a * (sc_a / r) - b * (sc_b / r) + (lo_a - lo_b) / r
    return ad.mean(ad.square(diff))


def open_circuit_current(view: SignalView, topology: CircuitTopology, scaler=None) -> Tensor:
    names = topology.open_circuit_currents
    if not names:
        return Tensor(0.0)
    return ad.mean(ad.square(view.channels(names) - scaled_targets(0.0, names, scaler)))


def inverter_voltage(view: SignalView, topology: CircuitTopology, scaler=None) -> Tensor:
    names = topology.inverter_voltage
    if not names:
        return Tensor(0.0)
    return ad.mean(ad.abs_(view.channels(names) - scaled_targets(topology.v_target, names, scaler)))


def inverter_frequency(view: SignalView, topology: CircuitTopology, scaler=None) -> Tensor:
    names = topology.inverter_frequency
    if not names:
        return Tensor(0.0)
    return ad.mean(ad.abs_(view.channels(names) - scaled_targets(topology.f_target, names, scaler)))


TERMS = ("d_squared", "e", "it", "E65", "ST65")


def phys_terms(O, topology: CircuitTopology, scaler=None, past_length: int | None = None) -> dict[str, Tensor]:
    view = SignalView(O, topology, past_length)
    return {
        "d_squared": d_squared(O),
        "e": pair_equality(view, topology, scaler),
        "it": open_circuit_current(view, topology, scaler),
        "E65": inverter_voltage(view, topology, scaler),
        "ST65": inverter_frequency(view, topology, scaler),
    }


def phys_inf_loss(O, topology: CircuitTopology, scaler=None, past_length: int | None = None) -> Tensor:
    """Sum of the five constraint terms."""
    terms = phys_terms(O, topology, scaler, past_length)
    total = terms["d_squared"]
    for name in TERMS[1:]:
        total = total + terms[name]
    return total


def check_columns(topology: CircuitTopology, data_columns) -> None:
    """Pre-flight check that every topology channel exists in the data."""
    missing = [c for c in topology.columns if c not in set(data_columns)]
    if missing:
        raise ConfigError(f"topology channels missing from data: {missing}")

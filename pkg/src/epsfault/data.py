"""Telemetry ingestion: CSV loading, cleaning, channel scaling, windowing, splits."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import DataError

log = logging.getLogger(__name__)

LABELS_FILE = "labels.csv"
LABEL_COLUMNS = ["file", "start", "end", "channel", "kind"]


@dataclass
class Frame:
    """One experiment file: timestamps, channel matrix and per-row labels."""

    name: str
    timestamps: np.ndarray
    columns: list[str]
    values: np.ndarray
    labels: np.ndarray = None
    fault_channels: np.ndarray = None
    dropped_rows: int = 0
    filled_cells: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        n = len(self.values)
        if self.labels is None:
            self.labels = np.zeros(n, dtype=np.int64)
        if self.fault_channels is None:
            self.fault_channels = np.full(n, "", dtype=object)

    @property
    def n_rows(self) -> int:
        return len(self.values)

    @property
    def has_fault(self) -> bool:
        return bool(self.labels.any())

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def select(self, columns: Sequence[str]) -> "Frame":
        missing = [c for c in columns if c not in self.columns]
        if missing:
            raise DataError(f"{self.name}: missing channels {missing}")
        idx = [self.columns.index(c) for c in columns]
        return replace(self, columns=list(columns), values=self.values[:, idx].copy())

    def copy(self) -> "Frame":
        return replace(self, values=self.values.copy(), labels=self.labels.copy(),
                       fault_channels=self.fault_channels.copy())


# -- loading ----------------------------------------------------------------
def load_csv(path: str | Path, name: str | None = None) -> Frame:
    """Read one telemetry CSV (first column timestamp, then channels).

    Non-numeric channels are dropped. Rows holding an unparseable value in a
    numeric channel are dropped and counted in ``Frame.dropped_rows``; empty
    cells are treated as gaps by :func:`clean_gaps`.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: empty file") from None
    if raw.shape[1] < 2:
        raise DataError(f"{path}: need a timestamp column and at least one channel")
    if len(raw) == 0:
        raise DataError(f"{path}: no data rows")
    raw = raw.apply(lambda s: s.str.strip())
    ts_col, channels = raw.columns[0], list(raw.columns[1:])
    numeric, corrupt = {}, np.zeros(len(raw), dtype=bool)
    for c in channels:
        s = raw[c]
        empty = s == ""
        parsed = pd.to_numeric(s.where(~empty), errors="coerce")
        bad = parsed.isna() & ~empty
        if (~empty).sum() and bad.sum() <= 0.5 * (~empty).sum():
            numeric[c] = parsed.to_numpy(dtype=np.float64)
            corrupt |= bad.to_numpy()
    if not numeric:
        raise DataError(f"{path}: no numeric columns")
    ts = pd.to_numeric(raw[ts_col], errors="coerce").to_numpy(dtype=np.float64)
    corrupt |= np.isnan(ts)
    keep = ~corrupt
    values = np.column_stack([numeric[c][keep] for c in numeric])
    frame = Frame(name=name or path.stem, timestamps=ts[keep], columns=list(numeric),
                  values=values, dropped_rows=int(corrupt.sum()))
    frame = clean_gaps(frame)
    if frame.n_rows == 0:
        raise DataError(f"{path}: no data rows")
    order = np.argsort(frame.timestamps, kind="stable")
    if np.any(order != np.arange(frame.n_rows)):
        frame = replace(frame, timestamps=frame.timestamps[order], values=frame.values[order])
    return frame


def clean_gaps(frame: Frame) -> Frame:
    """Forward-fill single-sample gaps; drop rows inside longer gaps."""
    v = frame.values.copy()
    nan = np.isnan(v)
    if not nan.any():
        return frame
    drop = np.zeros(len(v), dtype=bool)
    filled = 0
    for j in range(v.shape[1]):
        col = nan[:, j]
        if not col.any():
            continue
        run_id = np.cumsum(np.r_[True, col[1:] != col[:-1]])
        lengths = np.bincount(run_id)[run_id]
        single = col & (lengths == 1)
        single[0] = False
        idx = np.flatnonzero(single)
        v[idx, j] = v[idx - 1, j]
        filled += len(idx)
        drop |= col & ~single
    keep = ~drop
    return replace(frame, timestamps=frame.timestamps[keep], values=v[keep],
                   labels=frame.labels[keep], fault_channels=frame.fault_channels[keep],
                   dropped_rows=frame.dropped_rows + int(drop.sum()), filled_cells=filled)


def read_labels(path: str | Path) -> pd.DataFrame:
    """Sidecar fault annotations: ``file,start,end,channel,kind`` per fault."""
    path = Path(path)
    if not path.exists():
        return pd.DataFrame(columns=LABEL_COLUMNS)
    df = pd.read_csv(path, dtype={"file": str, "channel": str, "kind": str}, keep_default_na=False)
    missing = set(LABEL_COLUMNS[:3]) - set(df.columns)
    if missing:
        raise DataError(f"{path}: labels file lacks columns {sorted(missing)}")
    df["end"] = pd.to_numeric(df["end"], errors="coerce").fillna(np.inf)
    df["start"] = pd.to_numeric(df["start"], errors="coerce")
    for c in ("channel", "kind"):
        if c not in df.columns:
            df[c] = ""
    return df[LABEL_COLUMNS]


def write_labels(records: list[dict], path: str | Path) -> None:
    pd.DataFrame(records, columns=LABEL_COLUMNS).to_csv(path, index=False)


def apply_labels(frame: Frame, labels: pd.DataFrame) -> Frame:
    out = frame.copy()
    for rec in labels[labels["file"] == frame.name].itertuples(index=False):
        hit = (out.timestamps >= rec.start) & (out.timestamps <= rec.end)
        out.labels[hit] = 1
        out.fault_channels[hit] = rec.channel or "?"
    return out


def load_directory(data_dir: str | Path) -> list[Frame]:
    """Load every ``*.csv`` experiment in a directory plus its sidecar labels."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"no such directory: {data_dir}")
    labels = read_labels(data_dir / LABELS_FILE)
    frames = []
    for path in sorted(data_dir.glob("*.csv")):
        if path.name == LABELS_FILE:
            continue
        frame = load_csv(path)
        if frame.dropped_rows:
            log.info("%s: dropped %d rows while cleaning", path.name, frame.dropped_rows)
        frames.append(apply_labels(frame, labels))
    if not frames:
        raise DataError(f"{data_dir}: no experiment CSV files")
    return frames


def write_csv(frame: Frame, path: str | Path, timestamp_column: str = "time") -> None:
    df = pd.DataFrame(frame.values, columns=frame.columns)
    df.insert(0, timestamp_column, frame.timestamps)
    df.to_csv(path, index=False, float_format="%.10g")


# -- scaling ----------------------------------------------------------------
class ChannelScaler(TransformerMixin, BaseEstimator):
    """Per-channel min-max scaling to [0, 1] that never clips.

    Constant channels get a unit scale, so fitted rows map to 0.0 while
    later deviations stay visible. ``constant_`` flags those channels.
    """

    def __init__(self, columns=None):
        self.columns = columns

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        self.columns_ = list(self.columns) if self.columns is not None else [str(i) for i in range(X.shape[1])]
        if len(self.columns_) != X.shape[1]:
            raise ValueError(f"columns has {len(self.columns_)} names for {X.shape[1]} features")
        self.min_ = X.min(axis=0)
        self.data_max_ = X.max(axis=0)
        self.data_range_ = self.data_max_ - self.min_
        self.constant_ = self.data_range_ <= 0
        self.scale_ = np.where(self.constant_, 1.0, self.data_range_)
        return self

    def transform(self, X):
        check_is_fitted(self, "scale_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return (X - self.min_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "scale_")
        return np.asarray(X, dtype=np.float64) * self.scale_ + self.min_

    def to_dict(self) -> dict:
        return {"columns": self.columns_, "min": self.min_.tolist(), "max": self.data_max_.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelScaler":
        lo, hi = np.asarray(d["min"], float), np.asarray(d["max"], float)
        return cls(columns=d["columns"]).fit(np.vstack([lo, hi]))


def fit_scaler(frames: Frame | Sequence[Frame], nominal_mask=None) -> ChannelScaler:
    """Fit on nominal rows only (``labels == 0`` unless a mask is given)."""
    frames = [frames] if isinstance(frames, Frame) else list(frames)
    if nominal_mask is None:
        nominal_mask = [f.labels == 0 for f in frames]
    elif isinstance(nominal_mask, np.ndarray) and len(frames) == 1:
        nominal_mask = [nominal_mask]
    rows = np.vstack([f.values[m] for f, m in zip(frames, nominal_mask)])
    if len(rows) == 0:
        raise DataError("no nominal rows to fit the scaler on")
    scaler = ChannelScaler(columns=frames[0].columns).fit(rows)
    for c in np.asarray(scaler.columns_)[scaler.constant_]:
        log.info("channel %s is constant over the nominal training rows", c)
    return scaler


def apply_scaler(scaler: ChannelScaler, frame: Frame) -> Frame:
    if list(frame.columns) != list(scaler.columns_):
        frame = frame.select(scaler.columns_)
    return replace(frame, values=scaler.transform(frame.values))


# -- windows ----------------------------------------------------------------
@dataclass
class WindowBatch:
    """Flattened windows ``[n, past_length * n_features]``, time-major.

    Index ``t * n_features + c`` holds channel ``c`` at step ``t`` (oldest
    first); ``sequences`` gives the ``[n, past_length, n_features]`` view.
    """

    X: np.ndarray
    labels: np.ndarray
    past_length: int
    columns: list[str]
    sources: np.ndarray = None
    fault_channels: list[frozenset] = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.X)
        if self.sources is None:
            self.sources = np.full(n, "", dtype=object)
        if self.fault_channels is None:
            self.fault_channels = [frozenset()] * n

    def __len__(self) -> int:
        return len(self.X)

    @property
    def n_features(self) -> int:
        return len(self.columns)

    @property
    def sequences(self) -> np.ndarray:
        return self.X.reshape(len(self.X), self.past_length, self.n_features)

    def subset(self, mask) -> "WindowBatch":
        idx = np.flatnonzero(np.asarray(mask))
        return WindowBatch(self.X[idx], self.labels[idx], self.past_length, self.columns,
                           self.sources[idx], [self.fault_channels[i] for i in idx])

    @property
    def nominal(self) -> "WindowBatch":
        return self.subset(self.labels == 0)

    @staticmethod
    def concatenate(batches: Sequence["WindowBatch"]) -> "WindowBatch":
        batches = [b for b in batches]
        if not batches:
            raise DataError("no windows to concatenate")
        first = batches[0]
        return WindowBatch(
            np.concatenate([b.X for b in batches]) if batches else np.empty((0, 0)),
            np.concatenate([b.labels for b in batches]),
            first.past_length, first.columns,
            np.concatenate([b.sources for b in batches]),
            [fc for b in batches for fc in b.fault_channels],
        )


def make_windows(frame: Frame, past_length: int, stride: int = 1, label_rule: str = "any") -> WindowBatch:
    """Slide a ``past_length`` window over one frame.

    ``label_rule="any"`` marks a window faulty if any of its rows is;
    ``"last"`` uses the newest row only.
    """
    if past_length < 1 or stride < 1:
        raise ValueError("past_length and stride must be positive")
    n_rows, F = frame.values.shape
    if n_rows < past_length:
        raise DataError(f"{frame.name}: {n_rows} rows < past_length {past_length}")
    win = np.lib.stride_tricks.sliding_window_view(frame.values, past_length, axis=0)[::stride]
    X = np.ascontiguousarray(win.transpose(0, 2, 1)).reshape(len(win), past_length * F)
    lab_win = np.lib.stride_tricks.sliding_window_view(frame.labels, past_length)[::stride]
    if label_rule == "any":
        labels = lab_win.max(axis=1)
    elif label_rule == "last":
        labels = lab_win[:, -1]
    else:
        raise ValueError(f"unknown label_rule {label_rule!r}")
    fault_channels = [frozenset()] * len(X)
    names = sorted({c for c in frame.fault_channels if c})
    if names:
        hits = {}
        for c in names:
            rows = (frame.fault_channels == c).astype(np.int8)
            hits[c] = np.lib.stride_tricks.sliding_window_view(rows, past_length)[::stride].max(axis=1)
        fault_channels = [frozenset(c for c in names if hits[c][i]) for i in range(len(X))]
    return WindowBatch(X, labels.astype(np.int64), past_length, list(frame.columns),
                       np.full(len(X), frame.name, dtype=object), fault_channels)


# -- splits -----------------------------------------------------------------
@dataclass
class SplitSpec:
    seed: int = 0
    train_fraction: float = 0.70
    val_fraction: float = 0.30


@dataclass
class Split:
    index: int
    seed: int
    train_files: list[str]
    val_files: list[str]
    test_files: list[str]

    def to_dict(self) -> dict:
        return asdict(self)


def make_splits(frames: Sequence[Frame], spec: SplitSpec = SplitSpec(), count: int = 10) -> list[Split]:
    """Random file-level splits: ``train_fraction`` of files for training
    (of which ``val_fraction`` become validation), the rest for test."""
    names = sorted(f.name for f in frames)
    if len(set(names)) != len(names):
        raise DataError("experiment names must be unique")
    faulty = {f.name for f in frames if f.has_fault}
    n_train = int(round(spec.train_fraction * len(names)))
    n_val = int(round(spec.val_fraction * n_train))
    if n_train - n_val < 1 or len(names) - n_train < 1:
        raise DataError(f"{len(names)} files are too few for a {spec.train_fraction:.0%} split")
    splits = []
    for k in range(count):
        rng = np.random.default_rng([spec.seed, k])
        perm = [names[i] for i in rng.permutation(len(names))]
        train, test = perm[:n_train], sorted(perm[n_train:])
        split = Split(k, spec.seed, sorted(train[n_val:]), sorted(train[:n_val]), test)
        if not faulty & set(test):
            raise DataError(f"split {k}: test set has no fault windows")
        splits.append(split)
    return splits


def write_split_manifest(splits: Sequence[Split], path: str | Path, extra: dict | None = None) -> None:
    payload = {"splits": [s.to_dict() for s in splits], **(extra or {})}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def read_split_manifest(path: str | Path) -> list[Split]:
    payload = json.loads(Path(path).read_text())
    return [Split(**s) for s in payload["splits"]]


@dataclass
class PreparedSplit:
    scaler: ChannelScaler
    train: WindowBatch
    val: WindowBatch | None
    test: WindowBatch
    split: Split


def windows_for(frames: Sequence[Frame], scaler: ChannelScaler, past_length: int,
                label_rule: str = "any") -> WindowBatch:
    return WindowBatch.concatenate(
        [make_windows(apply_scaler(scaler, f), past_length, label_rule=label_rule) for f in frames])


def prepare_split(frames: Sequence[Frame], split: Split, columns: Sequence[str], past_length: int,
                  label_rule: str = "any") -> PreparedSplit:
    """Scale and window one split; the scaler sees nominal training rows only."""
    by_name = {f.name: f.select(columns) for f in frames}
    try:
        train_f = [by_name[n] for n in split.train_files]
        val_f = [by_name[n] for n in split.val_files]
        test_f = [by_name[n] for n in split.test_files]
    except KeyError as exc:
        raise DataError(f"split references unknown experiment {exc}") from None
    scaler = fit_scaler(train_f)
    train = windows_for(train_f, scaler, past_length, label_rule).nominal
    val = windows_for(val_f, scaler, past_length, label_rule) if val_f else None
    test = windows_for(test_f, scaler, past_length, label_rule)
    if len(train) == 0:
        raise DataError("no nominal training windows")
    return PreparedSplit(scaler, train, val, test, split)

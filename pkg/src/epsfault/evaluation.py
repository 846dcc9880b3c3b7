"""Anomaly scores and the detection metrics (AUROC, FPR at 95% TPR, F1).

Fault is the positive class and a window is flagged when its anomaly score
is ``>= threshold``. Higher scores are always more anomalous.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .exceptions import DataError


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).astype(np.int64).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise ValueError(f"scores ({len(self.scores)}) and labels ({len(self.labels)}) differ in length")

    @property
    def n_fault(self) -> int:
        return int((self.labels == 1).sum())

    @property
    def n_nominal(self) -> int:
        return int((self.labels == 0).sum())

    def require_both_classes(self) -> None:
        if self.n_fault == 0 or self.n_nominal == 0:
            raise DataError(f"need both classes, got {self.n_nominal} nominal / {self.n_fault} fault windows")


def _as_set(scores, labels=None) -> ScoreSet:
    return scores if isinstance(scores, ScoreSet) else ScoreSet(scores, labels)


def auroc(scores, labels=None) -> float:
    """Probability that a fault window outscores a nominal one, ties counting 1/2."""
    s = _as_set(scores, labels)
    s.require_both_classes()
    ranks = rankdata(s.scores)
    pos = s.labels == 1
    n_pos, n_neg = s.n_fault, s.n_nominal
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def fpr_at_tpr(scores, labels=None, tpr_target: float = 0.95) -> tuple[float, float]:
    """FPR at the largest threshold whose TPR reaches ``tpr_target``.

    Returns ``(fpr, threshold)``.
    """
    s = _as_set(scores, labels)
    s.require_both_classes()
    pos = np.sort(s.scores[s.labels == 1])[::-1]
    k = np.arange(1, len(pos) + 1)
    ok = k / len(pos) >= tpr_target
    if not ok.any():
        raise ValueError(f"tpr_target {tpr_target} is unreachable")
    threshold = float(pos[np.argmax(ok)])
    fpr = float(np.count_nonzero(s.scores[s.labels == 0] >= threshold) / s.n_nominal)
    return fpr, threshold


def confusion(scores, labels=None, threshold: float = 0.0) -> dict[str, int]:
    s = _as_set(scores, labels)
    pred = s.scores >= threshold
    pos = s.labels == 1
    return {
        "tp": int(np.count_nonzero(pred & pos)),
        "fp": int(np.count_nonzero(pred & ~pos)),
        "tn": int(np.count_nonzero(~pred & ~pos)),
        "fn": int(np.count_nonzero(~pred & pos)),
    }


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if tp == 0 or denom == 0 else 2.0 * tp / denom


def f1_at_threshold(scores, labels=None, threshold: float = 0.0) -> float:
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    c = confusion(scores, labels, threshold)
    return f1_from_counts(c["tp"], c["fp"], c["fn"])


def roc_points(scores, labels=None) -> np.ndarray:
    """``[k, 3]`` array of (threshold, fpr, tpr), thresholds descending."""
    s = _as_set(scores, labels)
    s.require_both_classes()
    order = np.argsort(-s.scores, kind="mergesort")
    sc, lab = s.scores[order], s.labels[order]
    last = np.r_[np.flatnonzero(np.diff(sc)), len(sc) - 1]
    tp = np.cumsum(lab == 1)[last]
    fp = np.cumsum(lab == 0)[last]
    pts = np.column_stack([sc[last], fp / s.n_nominal, tp / s.n_fault])
    return np.vstack([[np.inf, 0.0, 0.0], pts])


@dataclass
class EvalReport:
    auroc: float
    fpr95: float
    f1: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    n_nominal: int
    n_fault: int
    tpr_target: float = 0.95

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def table(self) -> str:
        rows = [
            ("AUROC", f"{self.auroc:.4f}"),
            (f"FPR@{self.tpr_target:.0%}TPR", f"{self.fpr95:.4f}"),
            ("F1", f"{self.f1:.4f}"),
            ("threshold", f"{self.threshold:.6g}"),
            ("TP / FP / TN / FN", f"{self.tp} / {self.fp} / {self.tn} / {self.fn}"),
            ("windows (nominal / fault)", f"{self.n_nominal} / {self.n_fault}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def report_from_scores(scores, labels=None, tpr_target: float = 0.95) -> EvalReport:
    s = _as_set(scores, labels)
    area = auroc(s)
    fpr, thr = fpr_at_tpr(s, tpr_target=tpr_target)
    c = confusion(s, threshold=thr)
    return EvalReport(area, fpr, f1_from_counts(c["tp"], c["fp"], c["fn"]), thr, **c,
                      n_nominal=s.n_nominal, n_fault=s.n_fault, tpr_target=tpr_target)


def anomaly_scores(model, X: np.ndarray, batch_size: int = 2048) -> np.ndarray:
    """Per-window anomaly score: MAE for GRU, MSE for the autoencoder,
    negative log-likelihood for the flow."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected [n, width] windows, got shape {X.shape}")
    out = np.empty(len(X))
    with ad.no_grad():
        for lo in range(0, len(X), batch_size):
            xb = X[lo:lo + batch_size]
            if model.kind == "realnvp":
                out[lo:lo + len(xb)] = -model.log_prob(xb).data
            else:
                err = model(xb).data - xb
                out[lo:lo + len(xb)] = (np.abs(err) if model.kind == "gru" else err ** 2).mean(axis=1)
    return out


def score(model, windows) -> ScoreSet:
    return ScoreSet(anomaly_scores(model, windows.X), windows.labels)


def evaluate(model, windows, tpr_target: float = 0.95) -> EvalReport:
    return report_from_scores(score(model, windows), tpr_target=tpr_target)


def write_roc_csv(scores, labels, path: str | Path) -> None:
    pts = roc_points(scores, labels)
    np.savetxt(path, pts[1:], delimiter=",", header="threshold,fpr,tpr", comments="")

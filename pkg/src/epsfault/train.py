"""Training loops, the composite loss, Adam and the dual update of the
physics-loss weight, plus the grid-search harness."""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, TrainingDiverged
from .flow import FlowModel, sample
from .nn import AutoencoderModel, GRUModel, Module, autoencoder_widths, load_checkpoint, save_checkpoint
from .physics import CircuitTopology, phys_inf_loss

log = logging.getLogger(__name__)

MODEL_KINDS = ("realnvp", "gru", "autoencoder")
# (layers, neurons) when the config leaves them unset
ARCH_DEFAULTS = {"realnvp": (4, 128), "gru": (2, 256), "autoencoder": (4, 256)}


@dataclass
class TrainConfig:
    model: str = "realnvp"
    pi_enabled: bool = False
    past_length: int = 10
    batch_size: int = 64
    epochs: int = 100
    learning_rate: float = 1e-3
    gen_count: int = 16
    beta_init: float = 0.1
    beta_step: float = 0.01
    seed: int = 0
    coupling_layers: int = 4
    layers: int | None = None
    neurons: int | None = None
    patience: int = 10
    clip_norm: float | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model: expected one of {MODEL_KINDS}, got {self.model!r}")
        for name in ("past_length", "batch_size", "epochs", "gen_count", "coupling_layers", "patience"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name}: must be a positive integer")
        for name in ("learning_rate",):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive")
        if self.beta_init < 0 or self.beta_step < 0:
            raise ConfigError("beta_init/beta_step: must be non-negative")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm: must be positive when set")

    @property
    def arch(self) -> tuple[int, int]:
        d_layers, d_neurons = ARCH_DEFAULTS[self.model]
        return (self.layers or d_layers, self.neurons or d_neurons)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)

    def key(self, exclude=("seed",)) -> str:
        """Stable hash of the configuration (seed excluded by default)."""
        d = {k: v for k, v in sorted(self.to_dict().items()) if k not in exclude}
        return hashlib.sha1(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def build_model_for(config: TrainConfig, n_features: int) -> Module:
    width = n_features * config.past_length
    layers, neurons = config.arch
    if config.model == "realnvp":
        return FlowModel(width, config.coupling_layers, layers, neurons, seed=config.seed)
    if config.model == "gru":
        return GRUModel(n_features, config.past_length, hidden=neurons, n_layers=layers, seed=config.seed)
    enc, dec = autoencoder_widths(layers, neurons)
    return AutoencoderModel(width, enc, dec, seed=config.seed)


# -- losses -----------------------------------------------------------------
def main_loss(kind: str, model: Module, batch) -> tuple[Tensor, Tensor]:
    """Model-specific data loss and the model output it was computed from.

    GRU: MAE of the reconstruction; autoencoder: MSE; flow: negative mean
    log-likelihood (the output is then the latent batch).
    """
    if kind != model.kind:
        raise ConfigError(f"main_loss: kind {kind!r} does not match model {model.kind!r}")
    x = ad.as_tensor(batch)
    if kind == "realnvp":
        lp = model.log_prob(x)
        return -ad.mean(lp), lp
    recon = model(x)
    err = recon - x
    loss = ad.mean(ad.abs_(err)) if kind == "gru" else ad.mean(ad.square(err))
    return loss, recon


def composite_loss(main, phys, beta: float) -> Tensor:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return ad.add(main, ad.mul(phys, float(beta)))


@dataclass
class LagrangianState:
    beta: float = 0.1

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


def lagrangian_update(state: LagrangianState, phys_value: float, beta_step: float) -> LagrangianState:
    """Projected sub-gradient ascent on the multiplier."""
    if phys_value < 0:
        raise ValueError("constraint violation must be non-negative")
    return LagrangianState(max(0.0, state.beta + beta_step * float(phys_value)))


# -- optimizer --------------------------------------------------------------
@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray | None]) -> AdamState:
    """One bias-corrected Adam update applied in place to ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(params) != len(state.m):
        raise ValueError(f"adam: {len(params)} params but state holds {len(state.m)}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"adam: gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def clip_global_norm(grads: list[np.ndarray | None], max_norm: float) -> list[np.ndarray | None]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
    if total <= max_norm or total == 0:
        return grads
    scale = max_norm / total
    return [None if g is None else g * scale for g in grads]


# -- training ---------------------------------------------------------------
@dataclass
class TrainResult:
    model: Module
    history: list[dict[str, Any]]
    beta: float
    epochs_run: int
    stopped_early: bool
    seconds: float


def _x(windows) -> np.ndarray:
    return np.asarray(getattr(windows, "X", windows), dtype=np.float64)


def validation_loss(model: Module, X: np.ndarray, batch_size: int = 2048) -> float:
    total = 0.0
    with ad.no_grad():
        for lo in range(0, len(X), batch_size):
            xb = X[lo:lo + batch_size]
            loss, _ = main_loss(model.kind, model, xb)
            total += loss.item() * len(xb)
    return total / len(X)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _set_rng_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state


def save_training_state(path: Path, model: Module, config: TrainConfig, adam: AdamState, extra: dict) -> None:
    arrays = {}
    for i, (m, v) in enumerate(zip(adam.m, adam.v)):
        arrays[f"adam_m/{i}"] = m
        arrays[f"adam_v/{i}"] = v
    best = extra.pop("best_state", None)
    if best is not None:
        for k, val in best.items():
            arrays[f"best/{k}"] = val
    meta = {"train_config": config.to_dict(), "adam_step": adam.step, "training": extra}
    save_checkpoint(path, model, meta, arrays)


def train_model(
    config: TrainConfig,
    train,
    val=None,
    topology: CircuitTopology | None = None,
    scaler=None,
    n_features: int | None = None,
    checkpoint_path: str | Path | None = None,
    resume: bool = False,
    stop_after_epochs: int | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train one model on nominal windows.

    ``train``/``val`` are window batches (or plain ``[n, width]`` arrays, in
    which case ``n_features`` is required). With ``pi_enabled`` the physics
    loss is applied to generated arrays (flow) or reconstructions
    (baselines) and weighted by a multiplier updated once per epoch.
    ``checkpoint_path`` stores the full training state after every epoch so
    ``resume=True`` continues a run bit-for-bit.
    """
    t0 = time.perf_counter()
    X = _x(train)
    if n_features is None:
        n_features = getattr(train, "n_features", None) or (topology.n_features if topology else None)
    if n_features is None:
        raise ConfigError("n_features is required when training on plain arrays")
    if X.ndim != 2 or X.shape[1] != n_features * config.past_length:
        raise ConfigError(f"training windows have shape {X.shape}; expected width "
                          f"{n_features} x {config.past_length}")
    if config.pi_enabled and topology is None:
        raise ConfigError("pi_enabled requires a circuit topology")
    X_val = None
    if val is not None:
        labels = getattr(val, "labels", None)
        X_val = _x(val) if labels is None else _x(val)[np.asarray(labels) == 0]
        if len(X_val) == 0:
            X_val = None

    model = build_model_for(config, n_features)
    params = model.parameters()
    adam = AdamState(lr=config.learning_rate)
    rng_shuffle = np.random.default_rng([config.seed, 1])
    rng_gen = np.random.default_rng([config.seed, 2])
    dual = LagrangianState(config.beta_init)
    history: list[dict] = []
    best_val, best_state, wait, start_epoch, stopped = math.inf, None, 0, 0, False

    ckpt = Path(checkpoint_path) if checkpoint_path else None
    if resume and ckpt is not None and ckpt.exists():
        saved, meta, extra = load_checkpoint(ckpt)
        if meta.get("train_config") != config.to_dict():
            raise ConfigError("resume: checkpoint was produced by a different train config")
        model.load_state_dict(saved.state_dict())
        st = meta["training"]
        adam.step = meta["adam_step"]
        n_p = len(params)
        if adam.step:
            adam.m = [extra[f"adam_m/{i}"].copy() for i in range(n_p)]
            adam.v = [extra[f"adam_v/{i}"].copy() for i in range(n_p)]
        _set_rng_state(rng_shuffle, st["rng_shuffle"])
        _set_rng_state(rng_gen, st["rng_gen"])
        dual = LagrangianState(st["beta"])
        history = st["history"]
        best_val = st["best_val"] if st["best_val"] is not None else math.inf
        wait, start_epoch, stopped = st["wait"], st["epoch"], st["stopped"]
        best_keys = [k for k in extra if k.startswith("best/")]
        best_state = {k[5:]: extra[k] for k in best_keys} or None

    n = len(X)
    bs = min(config.batch_size, n)
    n_steps = math.ceil(n / bs)
    epochs_this_call = 0
    epoch = start_epoch
    while epoch < config.epochs and not stopped:
        perm = rng_shuffle.permutation(n)
        main_sum = phys_sum = 0.0
        for step in range(n_steps):
            xb = X[perm[step * bs:(step + 1) * bs]]
            model.zero_grad()
            main, out = main_loss(config.model, model, xb)
            loss = main
            if config.pi_enabled:
                generated = sample(model, config.gen_count, rng_gen) if config.model == "realnvp" else out
                phys = phys_inf_loss(generated, topology, scaler, config.past_length)
                loss = composite_loss(main, phys, dual.beta)
                phys_sum += phys.item()
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch + 1}, step {step + 1}")
            loss.backward()
            grads = [p.grad for p in params]
            if config.clip_norm is not None:
                grads = clip_global_norm(grads, config.clip_norm)
            adam_step(adam, params, grads)
            main_sum += main.item()
        record = {"epoch": epoch + 1, "main_loss": main_sum / n_steps}
        if config.pi_enabled:
            mean_phys = phys_sum / n_steps
            record["phys_loss"] = mean_phys
            record["beta"] = dual.beta
            dual = lagrangian_update(dual, mean_phys, config.beta_step)
        val_loss = validation_loss(model, X_val) if X_val is not None else record["main_loss"]
        record["val_loss"] = val_loss
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch + 1}")
        if val_loss < best_val:
            best_val, best_state, wait = val_loss, model.state_dict(), 0
        else:
            wait += 1
            if wait >= config.patience:
                stopped = True
        history.append(record)
        epoch += 1
        epochs_this_call += 1
        if on_epoch is not None:
            on_epoch(record)
        if ckpt is not None:
            save_training_state(ckpt, model, config, adam, {
                "rng_shuffle": _rng_state(rng_shuffle), "rng_gen": _rng_state(rng_gen),
                "beta": dual.beta, "history": history, "best_val": best_val if math.isfinite(best_val) else None,
                "wait": wait, "epoch": epoch, "stopped": stopped, "best_state": best_state,
            })
        if stop_after_epochs is not None and epochs_this_call >= stop_after_epochs:
            break
    finished = stopped or epoch >= config.epochs
    if finished and best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(model, history, dual.beta, epoch, stopped, time.perf_counter() - t0)


# -- grid search ------------------------------------------------------------
def grid_plan(grid: dict[str, Sequence]) -> list[dict[str, Any]]:
    """Cartesian product of the grid, in declaration order."""
    if not grid:
        raise ConfigError("grid is empty")
    for k, vals in grid.items():
        if not isinstance(vals, (list, tuple)) or len(vals) == 0:
            raise ConfigError(f"grid entry {k!r} must be a non-empty list")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


TABLE_I_GRIDS = {
    "realnvp": {"past_length": [50, 30, 10], "coupling_layers": [2, 4, 6], "layers": [2, 4, 6, 8],
                "neurons": [512, 256, 128, 64, 32], "batch_size": [256, 128, 64, 32]},
    "gru": {"past_length": [50, 30, 10], "layers": [2, 4, 6, 8],
            "neurons": [512, 256, 128, 64, 32], "batch_size": [256, 128, 64, 32]},
    "autoencoder": {"past_length": [50, 30, 10], "layers": [2, 4, 6, 8],
                    "neurons": [512, 256, 128, 64, 32], "batch_size": [256, 128, 64, 32]},
}

RESULT_FIELDS = ["config_key", "seed", "status", "val_auc", "test_auc", "test_fpr95", "test_f1",
                 "epochs_run", "seconds", "params", "error"]


def _run_cell(task: tuple) -> dict:
    from .evaluation import auroc, report_from_scores, anomaly_scores

    config, prepared, topology = task
    row = {"config_key": config.key(), "seed": config.seed, "params": json.dumps(config.to_dict(), sort_keys=True)}
    try:
        res = train_model(config, prepared.train, prepared.val, topology, prepared.scaler)
        val_auc = math.nan
        if prepared.val is not None and len(set(prepared.val.labels.tolist())) == 2:
            val_auc = auroc(anomaly_scores(res.model, prepared.val.X), prepared.val.labels)
        rep = report_from_scores(anomaly_scores(res.model, prepared.test.X), prepared.test.labels)
        row.update(status="ok", val_auc=val_auc, test_auc=rep.auroc, test_fpr95=rep.fpr95, test_f1=rep.f1,
                   epochs_run=res.epochs_run, seconds=round(res.seconds, 3), error="")
    except Exception as exc:  # noqa: BLE001 - a failing cell must not stop the search
        log.warning("grid cell %s seed %s failed: %s", row["config_key"], config.seed, exc)
        row.update(status="error", val_auc=math.nan, test_auc=math.nan, test_fpr95=math.nan,
                   test_f1=math.nan, epochs_run=0, seconds=0.0, error=f"{type(exc).__name__}: {exc}")
    return row


def read_results(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_results(rows: list[dict], path: str | Path) -> None:
    rows = sorted(rows, key=lambda r: (r["config_key"], int(r["seed"])))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in RESULT_FIELDS})


def rank_results(rows: list[dict]) -> list[dict]:
    """One line per configuration, ordered by mean validation AUC (best first)."""
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r["config_key"], []).append(r)
    table = []
    for key, rs in groups.items():
        ok = [r for r in rs if r["status"] == "ok"]
        vals = [float(r["val_auc"]) for r in ok if not math.isnan(float(r["val_auc"]))]
        tests = [float(r["test_auc"]) for r in ok]
        table.append({
            "config_key": key,
            "params": rs[0]["params"],
            "seeds": len(rs),
            "failed": len(rs) - len(ok),
            "mean_val_auc": float(np.mean(vals)) if vals else math.nan,
            "mean_test_auc": float(np.mean(tests)) if tests else math.nan,
            "mean_test_fpr95": float(np.mean([float(r["test_fpr95"]) for r in ok])) if ok else math.nan,
            "mean_test_f1": float(np.mean([float(r["test_f1"]) for r in ok])) if ok else math.nan,
        })
    score = lambda t: -t["mean_val_auc"] if not math.isnan(t["mean_val_auc"]) else math.inf
    return sorted(table, key=lambda t: (score(t), t["config_key"]))


def grid_search(
    base: TrainConfig,
    grid: dict[str, Sequence],
    prepare: Callable[[int], Any],
    topology: CircuitTopology | None,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    results_path: str | Path | None = None,
    workers: int = 1,
) -> list[dict]:
    """Train every grid cell for every seed and rank configurations.

    ``prepare(past_length)`` returns the prepared split for that window
    length. Completed ``(config_key, seed)`` rows already in
    ``results_path`` are skipped, so an interrupted search resumes.
    """
    cells = grid_plan(grid)
    done = {(r["config_key"], int(r["seed"])): r for r in read_results(results_path)} if results_path else {}
    cache: dict[int, Any] = {}
    tasks = []
    for cell in cells:
        for seed in seeds:
            cfg = TrainConfig.from_dict({**base.to_dict(), **cell, "seed": seed})
            if (cfg.key(), seed) in done and done[(cfg.key(), seed)]["status"] == "ok":
                continue
            if cfg.past_length not in cache:
                cache[cfg.past_length] = prepare(cfg.past_length)
            tasks.append((cfg, cache[cfg.past_length], topology))
    rows = list(done.values())
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for row in pool.map(_run_cell, tasks):
                rows = [r for r in rows if (r["config_key"], int(r["seed"])) != (row["config_key"], row["seed"])]
                rows.append(row)
                if results_path:
                    write_results(rows, results_path)
    else:
        for task in tasks:
            row = _run_cell(task)
            rows = [r for r in rows if (r["config_key"], int(r["seed"])) != (row["config_key"], row["seed"])]
            rows.append(row)
            if results_path:
                write_results(rows, results_path)
    normalized = [{**r, "seed": int(r["seed"]), "val_auc": float(r["val_auc"]),
                   "test_auc": float(r["test_auc"])} for r in rows]
    return rank_results(normalized)

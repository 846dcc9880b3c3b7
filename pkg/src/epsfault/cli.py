"""Command-line front end: ``epsfault synth|ingest|train|eval|grid|sample|report``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import autodiff as ad
from .data import (ChannelScaler, SplitSpec, load_directory, make_splits, prepare_split,
                   read_split_manifest, windows_for, write_split_manifest)
from .evaluation import EvalReport, anomaly_scores, report_from_scores, write_roc_csv
from .exceptions import ConfigError, DataError
from .nn import load_checkpoint
from .physics import CircuitTopology, check_columns, load_topology
from .synth import SynthConfig, generate_experiments, load_synth_config, write_experiments
from .train import TABLE_I_GRIDS, TrainConfig, grid_plan, grid_search, train_model

log = logging.getLogger("epsfault")

ENV_OUTPUT_ROOT = "EPSFAULT_OUTPUT_ROOT"
ENV_THREADS = "EPSFAULT_THREADS"


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def out_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(ENV_OUTPUT_ROOT)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_manifest(directory: Path, command: str, config: dict, seeds: list, inputs: list[Path],
                   outputs: list[Path]) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): sha256(p) for p in sorted(inputs) if Path(p).is_file()},
        "outputs": {Path(p).name: sha256(p) for p in outputs},
    }
    path = directory / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def parse_overrides(pairs: list[str] | None) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


def read_yaml(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: expected a mapping")
    return data


# -- synth ------------------------------------------------------------------
def cmd_synth(args) -> int:
    if args.config:
        config, dataset = load_synth_config(args.config)
    else:
        config, dataset = SynthConfig(), {}
    if args.seed is not None:
        config = SynthConfig.from_dict({**config.to_dict(), "seed": args.seed})
    if args.experiments is not None:
        dataset["n_experiments"] = args.experiments
    known = {"n_experiments", "fault_fraction", "kinds", "magnitude_sigma", "onset_range"}
    unknown = set(dataset) - known
    if unknown:
        raise ConfigError(f"dataset: unknown fields {sorted(unknown)}")
    dataset = {k: tuple(v) if isinstance(v, list) else v for k, v in dataset.items()}
    frames, labels = generate_experiments(config, **dataset)
    dest = out_dir(args.out)
    paths = write_experiments(frames, labels, dest)
    topo_path = dest / "synth.topology"
    topo_path.write_text(yaml.safe_dump(config.topology().to_dict(), sort_keys=False))
    inputs = [Path(args.config)] if args.config else []
    write_manifest(dest, "synth", {"synth": config.to_dict(), "dataset": dataset}, [config.seed],
                   inputs, paths + [topo_path])
    print(f"wrote {len(frames)} experiments ({len(labels)} with faults) to {dest}")
    print(f"channels ({len(config.columns)}): {', '.join(config.columns)}")
    print(f"rows per experiment: {config.duration}")
    return 0


# -- ingest -----------------------------------------------------------------
def _load_and_check(data_dir: str, topology: CircuitTopology):
    frames = load_directory(data_dir)
    for f in frames:
        check_columns(topology, f.columns)
    return frames


def cmd_ingest(args) -> int:
    topology = load_topology(args.topology)
    frames = _load_and_check(args.data, topology)
    spec = SplitSpec(seed=args.seed)
    splits = make_splits(frames, spec, count=args.count)
    dest = out_dir(args.out)
    summary = {
        "experiments": len(frames),
        "with_faults": sum(f.has_fault for f in frames),
        "rows": int(sum(f.n_rows for f in frames)),
        "dropped_rows": int(sum(f.dropped_rows for f in frames)),
        "filled_cells": int(sum(f.filled_cells for f in frames)),
        "columns": topology.columns,
    }
    path = dest / "splits.json"
    write_split_manifest(splits, path, {"split_spec": vars(spec), "summary": summary})
    inputs = sorted(Path(args.data).glob("*.csv"))
    write_manifest(dest, "ingest", {"split_spec": vars(spec), "count": args.count}, [spec.seed], inputs, [path])
    print(json.dumps(summary, indent=2))
    print(f"wrote {len(splits)} splits to {path}")
    return 0


def _resolve_split(args, frames):
    if getattr(args, "splits", None):
        splits = read_split_manifest(args.splits)
    else:
        splits = make_splits(frames, SplitSpec(seed=args.split_seed), count=args.split_index + 1)
    if not 0 <= args.split_index < len(splits):
        raise ConfigError(f"split index {args.split_index} out of range (have {len(splits)})")
    return splits[args.split_index]


# -- train ------------------------------------------------------------------
def cmd_train(args) -> int:
    topology = load_topology(args.topology)
    config = TrainConfig.from_dict({**read_yaml(args.config), **parse_overrides(args.set)})
    frames = _load_and_check(args.data, topology)
    split = _resolve_split(args, frames)
    prepared = prepare_split(frames, split, topology.columns, config.past_length)
    dest = out_dir(args.out)
    ckpt = dest / "checkpoint.npz"
    history_path = dest / "history.jsonl"

    def progress(rec):
        log.info("epoch %d: %s", rec["epoch"], {k: round(v, 6) for k, v in rec.items() if k != "epoch"})

    result = train_model(config, prepared.train, prepared.val, topology, prepared.scaler,
                         checkpoint_path=ckpt, resume=args.resume, stop_after_epochs=args.stop_after,
                         on_epoch=progress)
    history_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in result.history))
    finished = result.stopped_early or result.epochs_run >= config.epochs
    model_path = dest / "model.npz"
    if finished:
        from .nn import save_checkpoint

        save_checkpoint(model_path, result.model, {
            "train_config": config.to_dict(),
            "topology": topology.to_dict(),
            "scaler": prepared.scaler.to_dict(),
            "split": split.to_dict(),
            "beta": result.beta,
        })
    outputs = [ckpt, history_path] + ([model_path] if finished else [])
    inputs = [Path(p) for p in sorted(Path(args.data).glob("*.csv"))]
    inputs += [Path(p) for p in (args.config, args.topology) if p and Path(p).is_file()]
    write_manifest(dest, "train", config.to_dict(), [config.seed], inputs, outputs)
    state = "finished" if finished else "paused"
    print(f"{state} after {result.epochs_run} epochs; history: {history_path}")
    if finished:
        print(f"model: {model_path}")
    return 0


# -- eval -------------------------------------------------------------------
def _load_model(path: str):
    try:
        model, meta, _ = load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    if "scaler" not in meta or "topology" not in meta:
        raise ConfigError(f"{path}: not a trained model (use model.npz from `train`)")
    return model, meta


def cmd_eval(args) -> int:
    model, meta = _load_model(args.checkpoint)
    topology = CircuitTopology.from_dict(meta["topology"])
    scaler = ChannelScaler.from_dict(meta["scaler"])
    past_length = meta["train_config"]["past_length"]
    frames = _load_and_check(args.data, topology)
    names = set(meta.get("split", {}).get("test_files", []))
    if names and not args.all_files:
        frames = [f for f in frames if f.name in names] or frames
    frames = [f.select(topology.columns) for f in frames]
    windows = windows_for(frames, scaler, past_length)
    if args.sensor:
        if args.sensor not in topology.columns:
            raise ConfigError(f"unknown sensor {args.sensor!r}; channels: {topology.columns}")
        keep = (windows.labels == 0) | np.array([args.sensor in fc for fc in windows.fault_channels])
        windows = windows.subset(keep)
    scores = anomaly_scores(model, windows.X)
    report = report_from_scores(scores, windows.labels, args.tpr)
    dest = out_dir(args.out)
    suffix = f"_{args.sensor}" if args.sensor else ""
    rj, rt, rc = dest / f"report{suffix}.json", dest / f"report{suffix}.txt", dest / f"roc{suffix}.csv"
    rj.write_text(report.to_json())
    rt.write_text(report.table() + "\n")
    write_roc_csv(scores, windows.labels, rc)
    np.savetxt(dest / f"scores{suffix}.csv", np.column_stack([scores, windows.labels]), delimiter=",",
               header="score,label", comments="", fmt=["%.10g", "%d"])
    write_manifest(dest, f"eval{suffix}", {"sensor": args.sensor, "tpr_target": args.tpr},
                   [], [Path(args.checkpoint)], [rj, rt, rc])
    print(report.table())
    return 0


# -- grid -------------------------------------------------------------------
def cmd_grid(args) -> int:
    spec = read_yaml(args.spec)
    model = spec.get("model", "realnvp")
    grid = spec.get("grid")
    if grid == "table_i":
        grid = TABLE_I_GRIDS.get(model)
    if not grid:
        raise ConfigError("grid: empty grid")
    seeds = list(spec.get("seeds", [0, 1, 2, 3, 4]))
    base = TrainConfig.from_dict({**(spec.get("base") or {}), "model": model})
    plan = grid_plan(grid)
    if args.dry_run:
        for k, vals in grid.items():
            print(f"{k}: {vals}")
        print(f"cells: {len(plan)}")
        print(f"runs: {len(plan) * len(seeds)} ({len(seeds)} seeds)")
        return 0
    if not args.data:
        raise ConfigError("grid: --data is required unless --dry-run")
    topology = load_topology(spec.get("topology", args.topology))
    frames = _load_and_check(args.data, topology)
    args.split_seed = spec.get("split_seed", 0)
    args.split_index = spec.get("split_index", 0)
    split = _resolve_split(args, frames)
    dest = out_dir(args.out)
    results = dest / "grid_results.csv"
    workers = args.workers or int(os.environ.get(ENV_THREADS, "1"))
    ranked = grid_search(base, grid, lambda T: prepare_split(frames, split, topology.columns, T),
                         topology, seeds, results, workers)
    ranked_path = dest / "grid_ranked.json"
    ranked_path.write_text(json.dumps(ranked, indent=2, sort_keys=True, default=float))
    write_manifest(dest, "grid", {"spec": spec}, seeds, [Path(args.spec)], [results, ranked_path])
    for r in ranked[:10]:
        print(f"{r['config_key']}  val_auc={r['mean_val_auc']:.4f}  test_auc={r['mean_test_auc']:.4f}  "
              f"fpr95={r['mean_test_fpr95']:.4f}  {r['params']}")
    return 0


# -- sample -----------------------------------------------------------------
def range_summary(samples: np.ndarray, n_features: int, lo: float = 0.0, hi: float = 1.0) -> dict:
    inside = (samples >= lo) & (samples <= hi)
    per_index = inside.mean(axis=0) if len(samples) else np.full(samples.shape[1], math.nan)
    per_feature = per_index.reshape(-1, n_features).mean(axis=0) if len(samples) else per_index[:n_features]
    return {"count": int(len(samples)), "range": [lo, hi],
            "overall": float(inside.mean()) if len(samples) else math.nan,
            "per_feature": [float(v) for v in per_feature]}


def cmd_sample(args) -> int:
    model, meta = _load_model(args.checkpoint)
    if model.kind != "realnvp":
        raise ConfigError(f"{args.checkpoint} holds a {model.kind} model; sampling needs a flow")
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    columns = meta["topology"]["columns"]
    T = meta["train_config"]["past_length"]
    with ad.no_grad():
        samples = model.sample(args.count, np.random.default_rng(args.seed)).data
    out = Path(args.out)
    if not out.is_absolute() and os.environ.get(ENV_OUTPUT_ROOT):
        out = Path(os.environ[ENV_OUTPUT_ROOT]) / out
    out.parent.mkdir(parents=True, exist_ok=True)
    header = ",".join(f"{c}@t-{T - 1 - t}" for t in range(T) for c in columns)
    np.savetxt(out, samples, delimiter=",", header=header, comments="", fmt="%.10g")
    summary = range_summary(samples, len(columns))
    summary["features"] = columns
    summary_path = out.with_suffix(".summary.json")
    summary_path.write_text(json.dumps(summary, indent=2))
    print(f"in-range fraction [0, 1]: {summary['overall']:.4f}")
    for c, v in zip(columns, summary["per_feature"]):
        print(f"  {c}: {v:.4f}")
    return 0


# -- report -----------------------------------------------------------------
def cmd_report(args) -> int:
    path = Path(args.input)
    if not path.exists():
        raise ConfigError(f"no such file: {path}")
    if path.suffix == ".json":
        print(EvalReport.from_json(path.read_text()).table())
    elif path.suffix == ".csv":
        from .train import rank_results, read_results

        rows = [{**r, "seed": int(r["seed"]), "val_auc": float(r["val_auc"]), "test_auc": float(r["test_auc"])}
                for r in read_results(path)]
        for r in rank_results(rows):
            print(f"{r['config_key']}  seeds={r['seeds']}  val_auc={r['mean_val_auc']:.4f}  "
                  f"test_auc={r['mean_test_auc']:.4f}  fpr95={r['mean_test_fpr95']:.4f}  f1={r['mean_test_f1']:.4f}")
    elif path.suffix == ".jsonl":
        for line in path.read_text().splitlines():
            rec = json.loads(line)
            print("  ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()))
    else:
        raise ConfigError(f"cannot report on {path.suffix} files")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epsfault", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic telemetry + labels")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--experiments", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="load, clean and split a data directory")
    s.add_argument("--data", required=True)
    s.add_argument("--topology", default="adapt")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=10)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="train one model")
    s.add_argument("--data", required=True)
    s.add_argument("--topology", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--splits", help="splits.json from `ingest`")
    s.add_argument("--split-index", type=int, default=0)
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--resume", action="store_true")
    s.add_argument("--stop-after", type=int, help="pause after this many epochs (resume later)")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a trained model")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--sensor")
    s.add_argument("--tpr", type=float, default=0.95)
    s.add_argument("--all-files", action="store_true", help="ignore the checkpoint's test-file list")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("grid", help="grid search")
    s.add_argument("--spec", required=True)
    s.add_argument("--data")
    s.add_argument("--out", default="grid")
    s.add_argument("--topology", default="adapt")
    s.add_argument("--splits")
    s.add_argument("--workers", type=int)
    s.add_argument("--dry-run", action="store_true")
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("sample", help="generate windows from a trained flow")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--count", type=int, default=1000)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("report", help="print a report / grid results / history")
    s.add_argument("input")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

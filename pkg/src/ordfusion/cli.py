"""Command-line entry point: synth, train, fuse, sweep, report.

Every command writes a run manifest carrying the fully-resolved config
snapshot and its content hash, so runs are reproducible from the manifest
alone. Exit codes: 0 success, 2 config/usage error, 3 runtime failure.
The output root for training runs is ``--out``, else ``$CIG_RUNS_DIR``,
else ``./runs``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .datasets import (
    DatasetError,
    SyntheticSpec,
    build_synthetic_dataset,
    load_folder_dataset,
    save_folder_dataset,
    split_folds,
    _load_image_file,
)
from .evaluation import cross_validated_eval, per_category_metrics
from .generator import direct_add_fusion, fuse, generate
from .losses import ssim
from .training import (
    CheckpointError,
    ConfigError,
    TrainConfig,
    apply_ablation,
    load_inference_bundle,
    run_training,
)

RUNS_DIR_ENV = "CIG_RUNS_DIR"

SWEEPABLE = ("tau", "lambda", "alpha", "beta")

TRACE_FILE = "trace.jsonl"
CONFIG_FILE = "config.json"
MANIFEST_FILE = "run_manifest.json"
PREDICTIONS_FILE = "val_predictions.json"
REPORT_FILE = "report.json"
REPORT_CSV = "per_category.csv"


class CommandUsageError(Exception):
    """Bad flags, unreadable config, or invalid config contents (exit 2)."""


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class RunManifest:
    name: str
    command: str
    config: dict
    started_at: str
    finished_at: str = ""
    artifacts: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.config)

    def write(self, path: Path) -> Path:
        payload = {
            "name": self.name,
            "command": self.command,
            "config": self.config,
            "config_hash": self.hash,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "artifacts": self.artifacts,
        }
        path.write_text(json.dumps(payload, indent=2))
        return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S")


def _read_json(path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise CommandUsageError(f"{what} file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise CommandUsageError(f"{what} file {path} is not valid JSON: {exc}") from exc


def _runs_root(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(RUNS_DIR_ENV, "runs"))


# --------------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    raw = _read_json(args.spec, "spec")
    n_total = args.n if args.n is not None else raw.pop("n_total", None)
    raw.pop("n_total", None)
    if n_total is None:
        raise CommandUsageError("spec must carry n_total (or pass --n)")
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = SyntheticSpec.from_dict(raw)
    except DatasetError as exc:
        raise CommandUsageError(f"invalid spec: {exc}") from exc
    out_dir = Path(args.out) if args.out else Path("dataset")
    started = _now()
    ds = build_synthetic_dataset(spec, int(n_total))
    save_folder_dataset(ds, out_dir)
    (out_dir / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2))
    manifest_extra = {
        "k": ds.k,
        "counts": ds.counts,
        "n_total": len(ds),
        "seed": spec.seed,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest_extra, indent=2))
    manifest = RunManifest(
        name=out_dir.name,
        command="synth",
        config={"spec": spec.to_dict(), "n_total": int(n_total)},
        started_at=started,
        finished_at=_now(),
        artifacts={
            "dataset": str(out_dir),
            "spec": str(out_dir / "spec.json"),
            "manifest": str(out_dir / "manifest.json"),
        },
    )
    manifest.write(out_dir / MANIFEST_FILE)
    print(f"wrote {len(ds)} images in {ds.k} categories to {out_dir} (counts={ds.counts})")
    return 0


# --------------------------------------------------------------------- train


def _resolve_train_config(args) -> tuple[TrainConfig, dict]:
    raw = _read_json(args.config, "config")
    data_section = dict(raw.pop("data", {}))
    if getattr(args, "data", None):
        data_section["path"] = args.data
    if "path" not in data_section:
        raise CommandUsageError("config needs data.path (or pass --data)")
    try:
        cfg = TrainConfig.from_dict(raw)
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        if getattr(args, "ablation", None):
            cfg = apply_ablation(cfg, args.ablation)
    except ConfigError as exc:
        raise CommandUsageError(f"invalid config: {exc}") from exc
    data_section.setdefault("val_fraction", 0.2)
    data_section.setdefault("image_size", None)
    return cfg, data_section


def _load_train_val(cfg: TrainConfig, data_section: dict):
    ds = load_folder_dataset(data_section["path"], image_size=data_section["image_size"])
    vf = float(data_section["val_fraction"])
    if not 0.0 < vf < 0.5:
        raise CommandUsageError(f"val_fraction must lie in (0, 0.5), got {vf}")
    n_folds = max(2, round(1.0 / vf))
    train_idx, val_idx = split_folds(ds, n_folds, seed=cfg.seed)[0]
    return ds, ds.subset(train_idx), ds.subset(val_idx)


def cmd_train(args) -> int:
    cfg, data_section = _resolve_train_config(args)
    snapshot = {"data": data_section, **cfg.to_dict()}
    name = args.name or f"run-{config_hash(snapshot)[:8]}-s{cfg.seed}"
    run_dir = _runs_root(args) / name
    run_dir.mkdir(parents=True, exist_ok=True)
    started = _now()

    ds, train_ds, val_ds = _load_train_val(cfg, data_section)
    (run_dir / CONFIG_FILE).write_text(json.dumps(snapshot, indent=2))
    trace_path = run_dir / TRACE_FILE
    trace_path.unlink(missing_ok=True)

    trainer, _ = run_training(
        cfg, train_ds, val_ds, trace_path=trace_path, checkpoint_dir=run_dir
    )
    ckpt_path = trainer.save_checkpoint(run_dir / f"ckpt_{trainer.step}")

    records = trainer.evaluate(val_ds)
    (run_dir / PREDICTIONS_FILE).write_text(
        json.dumps(
            {
                "k": ds.k,
                "records": [
                    {"true": r.true_label, "pred": r.predicted_label} for r in records
                ],
            },
            indent=2,
        )
    )
    report = per_category_metrics(records, ds.k)
    report.write_json(run_dir / REPORT_FILE)
    report.write_csv(run_dir / REPORT_CSV)

    manifest = RunManifest(
        name=name,
        command="train",
        config=snapshot,
        started_at=started,
        finished_at=_now(),
        artifacts={
            "config": str(run_dir / CONFIG_FILE),
            "trace": str(trace_path),
            "checkpoint": str(ckpt_path),
            "predictions": str(run_dir / PREDICTIONS_FILE),
            "report": str(run_dir / REPORT_FILE),
            "report_csv": str(run_dir / REPORT_CSV),
        },
    )
    manifest.write(run_dir / MANIFEST_FILE)
    print(
        f"run {name}: val ACC {report.overall_acc:.2f}%, MAE {report.overall_mae:.3f} "
        f"({trainer.step} steps) -> {run_dir}"
    )
    return 0


# -------------------------------------------------------------------- report


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    missing = [
        str(run_dir / f)
        for f in (PREDICTIONS_FILE, CONFIG_FILE)
        if not (run_dir / f).exists()
    ]
    if missing:
        raise RuntimeError(f"incomplete run {run_dir}: missing {missing}")
    payload = json.loads((run_dir / PREDICTIONS_FILE).read_text())
    from .evaluation import PredictionRecord

    records = [
        PredictionRecord(true_label=r["true"], predicted_label=r["pred"])
        for r in payload["records"]
    ]
    report = per_category_metrics(records, payload["k"], gap_threshold=args.gap_threshold)
    report.write_json(run_dir / REPORT_FILE)
    report.write_csv(run_dir / REPORT_CSV)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


# ---------------------------------------------------------------------- fuse


def cmd_fuse(args) -> int:
    try:
        cfg, bcfg, model, separator, gen = load_inference_bundle(args.checkpoint)
    except CheckpointError as exc:
        raise CommandUsageError(str(exc)) from exc
    if gen is None:
        raise RuntimeError("checkpoint was trained without a generation network")

    def load(path) -> torch.Tensor:
        arr = _load_image_file(Path(path), image_size=bcfg.input_size)
        t = torch.from_numpy(arr)
        if t.ndim == 2:
            t = t.unsqueeze(0)
        if t.shape[0] != bcfg.in_channels:
            raise RuntimeError(
                f"{path} has {t.shape[0]} channels, checkpoint expects {bcfg.in_channels}"
            )
        return t.unsqueeze(0)

    x_main, x_ref = load(args.main), load(args.ref)
    with torch.no_grad():
        pyr_m = model.encode(x_main)
        pyr_r = model.encode(x_ref)
        if separator is not None:
            fused = fuse(separator(pyr_m.f4), separator(pyr_r.f4))
        else:
            fused = direct_add_fusion(pyr_m.f4, pyr_r.f4)
        x_fused = generate(cfg.generator_kind, gen, fused, pyr_m)
        labels = {
            name: int(model(x).argmax(dim=1).item()) + 1
            for name, x in (("main", x_main), ("ref", x_ref), ("fused", x_fused))
        }
        s_main = float(ssim(x_main[0], x_fused[0]).item())
        s_ref = float(ssim(x_ref[0], x_fused[0]).item())

    out = Path(args.out) if args.out else Path("fusion.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    arr = x_fused[0].numpy()
    arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(out)
    sidecar = {
        "ssim_main_fused": s_main,
        "ssim_ref_fused": s_ref,
        "predicted_labels": labels,
    }
    out.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    print(f"wrote {out} (ssim main={s_main:.4f} ref={s_ref:.4f}, labels={labels})")
    return 0


# --------------------------------------------------------------------- sweep


def _parse_grid(params: list[str]) -> dict[str, list[float]]:
    grid: dict[str, list[float]] = {}
    for spec in params:
        if "=" not in spec:
            raise CommandUsageError(f"--param expects name=v1,v2,... got {spec!r}")
        name, _, values = spec.partition("=")
        name = name.strip()
        if name not in SWEEPABLE:
            raise CommandUsageError(f"sweepable parameters are {SWEEPABLE}, got {name!r}")
        try:
            grid[name] = [float(v) for v in values.split(",") if v != ""]
        except ValueError as exc:
            raise CommandUsageError(f"bad grid values for {name}: {values!r}") from exc
        if not grid[name]:
            raise CommandUsageError(f"empty grid for {name}")
    if not grid:
        raise CommandUsageError("pass at least one --param name=v1,v2,...")
    return grid


def _cfg_with_point(cfg: TrainConfig, point: dict[str, float]) -> TrainConfig:
    mapping = {"tau": "tau", "lambda": "lam", "alpha": "alpha", "beta": "beta"}
    return cfg.with_overrides(**{mapping[k]: v for k, v in point.items()})


def cmd_sweep(args) -> int:
    cfg, data_section = _resolve_train_config(args)
    grid = _parse_grid(args.param)
    try:
        for point in [dict(zip(grid, vals)) for vals in itertools.product(*grid.values())]:
            _cfg_with_point(cfg, point)  # validate the whole grid up front
    except ConfigError as exc:
        raise CommandUsageError(f"invalid grid point: {exc}") from exc

    out_csv = Path(args.out) if args.out else Path("sweep.csv")
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    started = _now()
    ds = load_folder_dataset(data_section["path"], image_size=data_section["image_size"])
    folds = split_folds(ds, args.folds, seed=cfg.seed)  # shared across grid points

    names = [n for n in SWEEPABLE if n in grid]
    rows = []
    for values in itertools.product(*(grid[n] for n in names)):
        point = dict(zip(names, values))
        result = cross_validated_eval(
            _cfg_with_point(cfg, point), ds, args.folds, folds=folds
        )
        rows.append([point[n] for n in names] + [result.mean_acc, result.mean_mae])
        print(f"{point} -> ACC {result.mean_acc:.2f}%, MAE {result.mean_mae:.3f}")

    with open(out_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(names + ["acc", "mae"])
        writer.writerows(rows)
    manifest = RunManifest(
        name=out_csv.stem,
        command="sweep",
        config={"data": data_section, "grid": grid, "folds": args.folds, **cfg.to_dict()},
        started_at=started,
        finished_at=_now(),
        artifacts={"csv": str(out_csv)},
    )
    manifest.write(out_csv.with_suffix(".manifest.json"))
    print(f"wrote {len(rows)} grid rows to {out_csv}")
    return 0


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ordfusion",
        description="Ordinal regression training with generated boundary samples",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a folder-layout toy dataset")
    p.add_argument("--spec", required=True, help="SyntheticSpec JSON file")
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--n", type=int, help="total sample count (overrides spec n_total)")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a folder dataset")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--data", help="dataset directory (overrides config data.path)")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--out", help="runs root (default $CIG_RUNS_DIR or ./runs)")
    p.add_argument("--name", help="run name (default derived from config hash)")
    p.add_argument(
        "--ablation",
        choices=["base", "ig", "sf", "full"],
        help="preset flag combination",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="per-category report for a finished run")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--gap-threshold", type=float, default=20.0)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("fuse", help="generate one fusion image from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--main", required=True, help="main image file (structure source)")
    p.add_argument("--ref", required=True, help="reference image file (category source)")
    p.add_argument("--out", help="output PNG path")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("sweep", help="grid sweep over tau/lambda/alpha/beta")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--data", help="dataset directory (overrides config data.path)")
    p.add_argument("--param", action="append", default=[], help="name=v1,v2,...")
    p.add_argument("--folds", type=int, default=2)
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CommandUsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

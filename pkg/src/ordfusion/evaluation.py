"""Accuracy/MAE metrics, per-category breakdowns, and minority analysis.

ACC is percent correct; MAE is the mean absolute difference between predicted
and true category indices. Per-category reports group records by true label,
mark categories whose accuracy falls more than a gap threshold below the best
category as minorities, and aggregate metrics over the flagged set.
Categories without records carry ``None`` metrics rather than zeros.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

DEFAULT_GAP_THRESHOLD = 20.0  # percentage points below the best category


@dataclass(frozen=True)
class PredictionRecord:
    true_label: int
    predicted_label: int


def _check_records(records) -> None:
    if not records:
        raise ValueError("no prediction records")


def accuracy(records) -> float:
    """Percent of records with predicted_label == true_label."""
    _check_records(records)
    correct = sum(1 for r in records if r.predicted_label == r.true_label)
    return 100.0 * correct / len(records)


def mae(records) -> float:
    """Mean |predicted_label - true_label| over the records."""
    _check_records(records)
    return sum(abs(r.predicted_label - r.true_label) for r in records) / len(records)


@dataclass
class CategoryMetrics:
    label: int
    count: int
    acc: float | None
    mae: float | None
    minority: bool = False


@dataclass
class PerCategoryReport:
    overall_acc: float
    overall_mae: float
    per_category: list[CategoryMetrics] = field(default_factory=list)
    minority_labels: list[int] = field(default_factory=list)
    minority_acc: float | None = None
    minority_mae: float | None = None

    def to_dict(self) -> dict:
        return {
            "overall": {"acc": self.overall_acc, "mae": self.overall_mae},
            "per_category": [
                {
                    "label": c.label,
                    "acc": c.acc,
                    "mae": c.mae,
                    "count": c.count,
                    "minority": c.minority,
                }
                for c in self.per_category
            ],
            "minority": {
                "acc": self.minority_acc,
                "mae": self.minority_mae,
                "labels": list(self.minority_labels),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PerCategoryReport":
        return cls(
            overall_acc=d["overall"]["acc"],
            overall_mae=d["overall"]["mae"],
            per_category=[
                CategoryMetrics(
                    label=c["label"],
                    count=c["count"],
                    acc=c["acc"],
                    mae=c["mae"],
                    minority=c["minority"],
                )
                for c in d["per_category"]
            ],
            minority_labels=list(d["minority"]["labels"]),
            minority_acc=d["minority"]["acc"],
            minority_mae=d["minority"]["mae"],
        )

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    def write_csv(self, path) -> Path:
        """Bar-chart-ready rows: label, acc, mae."""
        path = Path(path)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["label", "acc", "mae"])
            for c in self.per_category:
                writer.writerow([c.label, c.acc, c.mae])
        return path


def identify_minorities(report: PerCategoryReport, gap_threshold: float = DEFAULT_GAP_THRESHOLD) -> set[int]:
    """Labels whose accuracy is more than ``gap_threshold`` points below the best."""
    accs = {c.label: c.acc for c in report.per_category if c.acc is not None}
    if not accs:
        return set()
    best = max(accs.values())
    return {label for label, a in accs.items() if a < best - gap_threshold}


def per_category_metrics(
    records, k: int, gap_threshold: float = DEFAULT_GAP_THRESHOLD
) -> PerCategoryReport:
    """Group records by true label and build the full report."""
    _check_records(records)
    for r in records:
        if not 1 <= r.true_label <= k:
            raise ValueError(f"true label {r.true_label} outside 1..{k}")
        if not 1 <= r.predicted_label <= k:
            raise ValueError(f"predicted label {r.predicted_label} outside 1..{k}")
    groups: dict[int, list[PredictionRecord]] = {c: [] for c in range(1, k + 1)}
    for r in records:
        groups[r.true_label].append(r)
    per_category = [
        CategoryMetrics(
            label=c,
            count=len(groups[c]),
            acc=accuracy(groups[c]) if groups[c] else None,
            mae=mae(groups[c]) if groups[c] else None,
        )
        for c in range(1, k + 1)
    ]
    report = PerCategoryReport(
        overall_acc=accuracy(records),
        overall_mae=mae(records),
        per_category=per_category,
    )
    minorities = identify_minorities(report, gap_threshold)
    for c in report.per_category:
        c.minority = c.label in minorities
    report.minority_labels = sorted(minorities)
    minority_records = [r for r in records if r.true_label in minorities]
    if minority_records:
        report.minority_acc = accuracy(minority_records)
        report.minority_mae = mae(minority_records)
    return report


@dataclass
class CrossValResult:
    """Fold-averaged metrics plus the pooled per-category breakdown."""

    mean_acc: float
    mean_mae: float
    acc_spread: float
    mae_spread: float
    fold_reports: list[PerCategoryReport]
    pooled_report: PerCategoryReport

    def to_dict(self) -> dict:
        return {
            "mean_acc": self.mean_acc,
            "mean_mae": self.mean_mae,
            "acc_spread": self.acc_spread,
            "mae_spread": self.mae_spread,
            "folds": [r.to_dict() for r in self.fold_reports],
            "pooled": self.pooled_report.to_dict(),
        }


def cross_validated_eval(
    cfg,
    ds,
    n_folds: int,
    fold_seed: int = 0,
    gap_threshold: float = DEFAULT_GAP_THRESHOLD,
    folds=None,
) -> CrossValResult:
    """Train once per fold and average validation metrics over folds.

    ``folds`` may carry precomputed (train, val) index partitions so that
    parameter sweeps reuse one split; otherwise folds are derived from
    ``fold_seed``. Per-fold training is seed-deterministic given ``cfg.seed``.
    """
    from .datasets import split_folds
    from .training import run_training

    if folds is None:
        folds = split_folds(ds, n_folds, seed=fold_seed)
    fold_reports = []
    pooled_records = []
    for train_idx, val_idx in folds:
        train_ds = ds.subset(train_idx)
        val_ds = ds.subset(val_idx)
        trainer, _ = run_training(cfg, train_ds, val_ds)
        records = trainer.evaluate(val_ds)
        pooled_records.extend(records)
        fold_reports.append(per_category_metrics(records, ds.k, gap_threshold))
    accs = [r.overall_acc for r in fold_reports]
    maes = [r.overall_mae for r in fold_reports]
    return CrossValResult(
        mean_acc=sum(accs) / len(accs),
        mean_mae=sum(maes) / len(maes),
        acc_spread=max(accs) - min(accs),
        mae_spread=max(maes) - min(maes),
        fold_reports=fold_reports,
        pooled_report=per_category_metrics(pooled_records, ds.k, gap_threshold),
    )

"""Metrics and experiment harnesses: accuracy, entropy diagnostics, sweeps.

Harness functions (sparsity sweep, ablations) import the trainer lazily so
the trainer can use these metric primitives without an import cycle.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .data import TEST, CrowdDataset, remove_annotations


# ---------------------------------------------------------------------------
# metric primitives


def predictions(classifier, x: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties resolve to the smallest class index."""
    probs = classifier.probs(np.asarray(x, dtype=np.float64)).data
    return probs.argmax(axis=1)


def accuracy(classifier, x: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot compute accuracy on an empty split")
    return float(np.mean(predictions(classifier, x) == labels))


def per_class_accuracy(classifier, x, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-class match rates and class counts (count 0 -> accuracy NaN)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot compute accuracy on an empty split")
    preds = predictions(classifier, x)
    num_classes = classifier.dims.num_classes
    accs = np.full(num_classes, np.nan)
    counts = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        mask = labels == c
        counts[c] = mask.sum()
        if counts[c]:
            accs[c] = float(np.mean(preds[mask] == c))
    return accs, counts


def entropy_accuracy_curve(classifier, x, labels) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative accuracy over instances sorted by ascending output entropy.

    Returns (sorted entropies, cumulative accuracy); point i covers the i+1
    lowest-entropy instances, so the final point equals overall accuracy.
    """
    labels = np.asarray(labels, dtype=np.int64)
    probs = classifier.probs(np.asarray(x, dtype=np.float64)).data
    ent = dc.entropy(probs, axis=1)
    order = np.argsort(ent, kind="stable")
    correct = (probs.argmax(axis=1) == labels)[order]
    cum_acc = np.cumsum(correct) / np.arange(1, len(labels) + 1)
    return ent[order], cum_acc


def decile_points(cum_acc: np.ndarray) -> np.ndarray:
    """Cumulative-accuracy values at the 10 decile cut points."""
    n = len(cum_acc)
    idx = np.maximum((np.arange(1, 11) * n) // 10, 1) - 1
    return cum_acc[idx]


def nonincreasing_fraction(values: np.ndarray, tol: float = 1e-12) -> float:
    """Fraction of adjacent pairs where the sequence does not increase."""
    diffs = np.diff(np.asarray(values, dtype=np.float64))
    if diffs.size == 0:
        return 1.0
    return float(np.mean(diffs <= tol))


def _ranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing their mean rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc(positive_scores, negative_scores) -> float:
    """Rank-based AUC: P(random positive outranks random negative)."""
    pos = np.asarray(positive_scores, dtype=np.float64)
    neg = np.asarray(negative_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs both positive and negative scores")
    ranks = _ranks(np.concatenate([pos, neg]))
    rank_sum = ranks[:len(pos)].sum()
    return float((rank_sum - len(pos) * (len(pos) + 1) / 2.0) / (len(pos) * len(neg)))


def spearman(x, y) -> float:
    """Rank correlation via Pearson on average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("spearman needs two equal-length sequences of size >= 2")
    rx, ry = _ranks(x), _ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0.0:
        return 0.0
    return float((rx * ry).sum() / denom)


# ---------------------------------------------------------------------------
# reports


@dataclass
class RunReport:
    """Per-epoch metric records plus a final summary block."""

    epochs: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def validate(self) -> None:
        for i, rec in enumerate(self.epochs):
            if rec.get("epoch") != i:
                raise ValueError("epoch records must be contiguous from 0")
            for key in ("train_acc", "val_acc", "test_acc"):
                v = rec.get(key)
                if v is not None and np.isfinite(v) and not 0.0 <= v <= 1.0:
                    raise ValueError(f"{key} out of [0,1] at epoch {i}")

    def to_csv(self, path: str | Path) -> None:
        if not self.epochs:
            Path(path).write_text("", encoding="utf-8")
            return
        keys = list(self.epochs[0].keys())
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
            writer.writeheader()
            for rec in self.epochs:
                writer.writerow(rec)

    def to_json(self, path: str | Path) -> None:
        payload = {"summary": self.summary, "epochs": self.epochs}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


@dataclass
class SweepTable:
    """axis value x method -> per-seed accuracies with mean/std aggregation."""

    axis_name: str
    axis_values: list
    methods: list[str]
    cells: dict = field(default_factory=dict)  # (axis_value, method) -> list[float]

    def add(self, axis_value, method: str, acc: float) -> None:
        self.cells.setdefault((axis_value, method), []).append(float(acc))

    def mean(self, axis_value, method: str) -> float:
        return float(np.mean(self.cells[(axis_value, method)]))

    def std(self, axis_value, method: str) -> float:
        return float(np.std(self.cells[(axis_value, method)]))

    def validate(self) -> None:
        sizes = {len(v) for v in self.cells.values()}
        if len(sizes) > 1:
            raise ValueError(f"cells aggregate unequal seed counts: {sorted(sizes)}")

    def rows(self) -> list[dict]:
        out = []
        for value in self.axis_values:
            for method in self.methods:
                accs = self.cells.get((value, method), [])
                out.append({
                    self.axis_name: value,
                    "method": method,
                    "mean_acc": float(np.mean(accs)) if accs else float("nan"),
                    "std_acc": float(np.std(accs)) if accs else float("nan"),
                    "num_seeds": len(accs),
                })
        return out

    def to_csv(self, path: str | Path) -> None:
        rows = self.rows()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()),
                                    lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow(row)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.rows(), indent=2) + "\n",
                              encoding="utf-8")


# ---------------------------------------------------------------------------
# experiment harnesses


ABLATION_VARIANTS = ("full", "no-info", "no-instance-features",
                     "no-annotator-features", "random-selection")


def _test_accuracy_of(result, ds: CrowdDataset) -> float:
    test_idx = ds.split_indices(TEST)
    return accuracy(result.classifier, ds.features[test_idx],
                    ds.ground_truth[test_idx])


def sparsity_sweep(ds: CrowdDataset, fractions, methods, seeds,
                   cfg=None) -> SweepTable:
    """Remove -> train -> test-accuracy grid over (fraction, method, seed)."""
    from . import trainer as trainer_mod

    table = SweepTable(axis_name="fraction", axis_values=list(fractions),
                       methods=list(methods))
    for fraction in fractions:
        for seed in seeds:
            reduced = remove_annotations(ds, fraction, seed=seed)
            for method in methods:
                run_cfg = trainer_mod.TrainConfig(**{
                    **(cfg.__dict__ if cfg is not None else {}), "seed": seed})
                result = trainer_mod.train_method(reduced, run_cfg, method)
                table.add(fraction, method, _test_accuracy_of(result, reduced))
    table.validate()
    return table


def apply_ablation(cfg, variant: str):
    """Return a copy of ``cfg`` with one component switched off."""
    from .trainer import TrainConfig

    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; "
                         f"expected one of {ABLATION_VARIANTS}")
    tweaks = {
        "full": {},
        "no-info": {"info_weight": 0.0},
        "no-instance-features": {"gen_use_instance_features": False},
        "no-annotator-features": {"gen_use_annotator_features": False},
        "random-selection": {"selection_mode": "uniform"},
    }[variant]
    return TrainConfig(**{**cfg.__dict__, **tweaks})


def run_ablation(ds: CrowdDataset, variant: str, cfg, seeds) -> SweepTable:
    """Train one ablation variant across seeds; one-row sweep table."""
    from . import trainer as trainer_mod

    table = SweepTable(axis_name="variant", axis_values=[variant],
                       methods=["crowding"])
    for seed in seeds:
        run_cfg = apply_ablation(
            trainer_mod.TrainConfig(**{**cfg.__dict__, "seed": seed}), variant)
        result = trainer_mod.train_crowding(ds, run_cfg)
        table.add(variant, "crowding", _test_accuracy_of(result, ds))
    table.validate()
    return table

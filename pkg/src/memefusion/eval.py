"""Metrics, split evaluation, baseline battery, ablation grid, reports.

AUROC is the Mann-Whitney estimator computed from midranks (ties count
one half), which equals the brute-force pairwise probability exactly; the
O(n^2) oracle it must match lives in the test suite. The emitted ROC curve
groups tied scores into single steps so its trapezoidal area reproduces
the same number.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ArgumentError, ConfigError, UndefinedMetricError
from .fusion import HeadParams
from .nn import AdamW, derive_seed, sigmoid

ABLATION_ROWS = (
    (False, False, False),
    (True, False, False),
    (True, True, False),
    (True, True, True),
)
BASELINE_ORDER = ("text_only", "image_only", "text_plus_ti", "sum")


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.size == 0:
        raise ArgumentError("accuracy of an empty score list is undefined")
    if s.shape != y.shape:
        raise ArgumentError(f"scores shape {s.shape} != labels shape {y.shape}")
    return float(np.mean((s >= threshold).astype(int) == y))


def auroc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counted one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ArgumentError(f"scores shape {s.shape} != labels shape {y.shape}")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUROC needs both classes, got {n_pos} positive / {n_neg} negative")
    ranks = rankdata(s)
    pos_rank_sum = float(np.sum(ranks[y == 1]))
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_points(scores, labels) -> np.ndarray:
    """(fpr, tpr) steps from (0, 0) to (1, 1); tied scores move jointly."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both classes present")
    order = np.argsort(-s, kind="stable")
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and s[order[j]] == s[order[i]]:
            if y[order[j]] == 1:
                tp += 1
            else:
                fp += 1
            j += 1
        points.append((fp / n_neg, tp / n_pos))
        i = j
    return np.array(points, dtype=np.float64)


@dataclass
class MetricsReport:
    split: str
    n: int
    accuracy: float
    auroc: float
    config_hash: str
    records: list = field(default_factory=list)
    roc: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "n": self.n,
            "accuracy": self.accuracy,
            "auroc": self.auroc,
            "config_hash": self.config_hash,
            "records": self.records,
            "roc": self.roc,
        }


def evaluate(model, feats: list, split_name: str, config_hash: str = "") -> MetricsReport:
    """Score a labeled split deterministically (dropout off)."""
    if not feats:
        raise ArgumentError(f"split '{split_name}' is empty")
    if any(f.label is None for f in feats):
        raise ArgumentError(
            f"split '{split_name}' has unlabeled records; use predict for scoring")
    scores = np.asarray(model.predict_proba(feats), dtype=np.float64)
    labels = np.array([f.label for f in feats])
    points = roc_points(scores, labels)
    return MetricsReport(
        split=split_name,
        n=len(feats),
        accuracy=accuracy(scores, labels),
        auroc=auroc(scores, labels),
        config_hash=config_hash,
        records=[
            {"id": f.record_id, "score": float(s), "label": int(l),
             "prediction": int(s >= 0.5)}
            for f, s, l in zip(feats, scores, labels)
        ],
        roc=[[float(a), float(b)] for a, b in points],
    )


# -- report emission -----------------------------------------------------------


def _g17(x) -> str:
    return format(float(x), ".17g")


def emit_report(report: MetricsReport, fmt: str, path) -> Path:
    """Write a report as json, csv (per-sample dump), or markdown."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=1, sort_keys=False)
            fh.write("\n")
    elif fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "score", "label", "prediction"])
            for rec in report.records:
                writer.writerow([rec["id"], _g17(rec["score"]), rec["label"],
                                 rec["prediction"]])
    elif fmt == "markdown":
        lines = [
            f"# Evaluation: {report.split}",
            "",
            f"Config hash: `{report.config_hash}`",
            "",
            "| Metric | Value |",
            "| --- | --- |",
            f"| n | {report.n} |",
            f"| Accuracy | {report.accuracy:.4f} |",
            f"| AUROC | {report.auroc:.4f} |",
        ]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        raise ConfigError("format", f"unknown report format {fmt!r}")
    return path


def emit_table(rows: list, columns: list, fmt: str, path) -> Path:
    """Rows of dicts -> csv or markdown with a fixed column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def cell(value):
        if isinstance(value, float):
            return _g17(value) if fmt == "csv" else f"{value:.4f}"
        return str(value)

    if fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in rows:
                writer.writerow([cell(row[c]) for c in columns])
    elif fmt == "markdown":
        lines = ["| " + " | ".join(columns) + " |",
                 "| " + " | ".join("---" for _ in columns) + " |"]
        for row in rows:
            lines.append("| " + " | ".join(cell(row[c]) for c in columns) + " |")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        raise ConfigError("format", f"unknown table format {fmt!r}")
    return path


# -- baseline battery ----------------------------------------------------------


class _BaselineProbe:
    """Train/eval protocol shim: a classification head over fixed features."""

    def __init__(self, head: HeadParams, pick):
        self.head = head
        self.pick = pick

    def zero_grad(self):
        self.head.zero_grad()

    def trainable_components(self):
        return {"head": self.head}

    def forward_features(self, feats, train=False, rng=None):
        x = np.stack([self.pick(f) for f in feats])
        return np.asarray(self.head.forward(x, train=train, rng=rng), dtype=np.float64)

    def backward_features(self, dlogits):
        self.head.backward(dlogits)

    def predict_proba(self, feats):
        return sigmoid(self.forward_features(feats, train=False))


def _baseline_pick(mode: str):
    if mode == "text_only":
        return lambda f: f.text_raw
    if mode == "image_only":
        return lambda f: f.visual_raw
    if mode == "text_plus_ti":
        return lambda f: f.ti_text_raw
    if mode == "sum":
        return lambda f: f.visual_raw + f.text_raw
    raise ConfigError("baseline.mode", f"unknown baseline mode {mode!r}")


def run_baselines(config, out_dir=None, splits=None, modes=BASELINE_ORDER) -> list:
    """Table 1/2 comparison rows: same head protocol over frozen features."""
    from .training import (
        FeatureStore, _run_epochs, build_model, load_splits, selection_split_name,
    )

    need_ti = "text_plus_ti" in modes
    if need_ti and not config["ablation"]["use_textual_inversion"]:
        raise ConfigError("ablation.use_textual_inversion",
                          "the text_plus_ti baseline needs textual inversion enabled")
    if splits is None:
        splits = load_splits(config)
    model = build_model(config)
    store = FeatureStore(model, root=config["data"]["root"])
    train_records = splits["train"].records
    train_feats = store.batch(train_records, with_ti_text=need_ti)
    train_labels = np.array([r.label for r in train_records], dtype=np.float64)
    sel_name = selection_split_name(config)
    select_feats = select_labels = None
    if sel_name and sel_name in splits:
        sel_records = [r for r in splits[sel_name].records if r.label is not None]
        if sel_records:
            select_feats = store.batch(sel_records, with_ti_text=need_ti)
            select_labels = np.array([r.label for r in sel_records], dtype=np.float64)
    test_name = "test_unseen" if config["data"]["source"] == "hmc" else "test"
    test_records = [r for r in splits[test_name].records if r.label is not None]
    test_feats = store.batch(test_records, with_ti_text=need_ti)

    d = model.backbone.meta.d
    seed = config["train"]["seed"]
    rows = []
    for mode in modes:
        head = HeadParams(d, dropout=config["model"]["head_dropout"],
                          seed=derive_seed(seed, f"baseline:{mode}"))
        probe = _BaselineProbe(head, _baseline_pick(mode))
        optim = AdamW(head.params(), lr=config["train"]["lr"],
                      weight_decay=config["train"]["weight_decay"])
        history: list = []
        best, _ = _run_epochs(probe, train_feats, train_labels, optim,
                              epochs=config["train"]["stage2_epochs"],
                              batch_size=config["train"]["batch_size"],
                              seed=derive_seed(seed, f"baseline:{mode}:loop"),
                              stage=f"-{mode}", history=history,
                              select_feats=select_feats, select_labels=select_labels)
        if best is not None:
            head.load_state(best[1]["head"])
        report = evaluate(probe, test_feats, test_name)
        rows.append({"mode": mode, "accuracy": report.accuracy, "auroc": report.auroc})
    if out_dir is not None:
        out_dir = Path(out_dir)
        emit_table(rows, ["mode", "accuracy", "auroc"], "csv", out_dir / "baselines.csv")
        emit_table(rows, ["mode", "accuracy", "auroc"], "markdown", out_dir / "baselines.md")
    return rows


# -- ablation grid ---------------------------------------------------------------


def run_ablation(config, out_dir) -> list:
    """Four toggle rows, each a full seed-fixed train+eval cycle.

    Row order follows the ablation table: base interaction-matrix model,
    +Combiner, +Combiner+two-stage, full model. Row 4's effective config
    is the main all-flags-on config, hash included.
    """
    import copy as _copy

    from .config import config_hash, resolve_config
    from .training import load_splits, train_all

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (use_comb, use_two, use_ti) in enumerate(ABLATION_ROWS, start=1):
        cfg = _copy.deepcopy(config)
        cfg["ablation"] = {
            "use_combiner": use_comb,
            "use_two_stage": use_two,
            "use_textual_inversion": use_ti,
        }
        cfg = resolve_config(cfg)
        row_dir = out_dir / f"row{i}"
        splits = load_splits(cfg)
        result = train_all(cfg, row_dir, splits=splits)
        test_name = "test_unseen" if cfg["data"]["source"] == "hmc" else "test"
        test_records = [r for r in splits[test_name].records if r.label is not None]
        test_feats = result["store"].batch(test_records)
        report = evaluate(result["model"], test_feats, test_name,
                          config_hash=config_hash(cfg))
        rows.append({
            "row": i,
            "combiner": use_comb,
            "two_stage": use_two,
            "textual_inversion": use_ti,
            "accuracy": report.accuracy,
            "auroc": report.auroc,
            "config_hash": config_hash(cfg),
            "checkpoint": str(result["final"]),
        })
    columns = ["row", "combiner", "two_stage", "textual_inversion",
               "accuracy", "auroc", "config_hash", "checkpoint"]
    emit_table(rows, columns, "csv", out_dir / "table.csv")
    emit_table(rows, columns, "markdown", out_dir / "table.md")
    return rows

"""Accuracy, confusion matrices, and per-epoch training history.

Confusion matrices store raw integer counts (rows = actual class, columns =
predicted); percentages are derived at render time so nothing is lost.
History serializes as JSON plus CSV, and the run summary prints the four
fields of the logging protocol: epochs trained, total time, time per epoch,
accuracy.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class ConfusionMatrix:
    def __init__(self, k: int):
        if k < 1:
            raise ValueError(f"need at least one class, got {k}")
        self.k = k
        self.counts = np.zeros((k, k), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, predictions, labels) -> None:
        """Increment counts[label][pred] for each (label, prediction) pair."""
        preds = np.asarray(predictions, dtype=np.int64)
        labs = np.asarray(labels, dtype=np.int64)
        if preds.shape != labs.shape:
            raise ValueError(f"predictions {preds.shape} vs labels {labs.shape}")
        for arr, what in ((preds, "prediction"), (labs, "label")):
            if arr.size and (arr.min() < 0 or arr.max() >= self.k):
                raise ValueError(f"{what} id out of range [0, {self.k})")
        np.add.at(self.counts, (labs, preds), 1)

    def merge(self, other: "ConfusionMatrix") -> None:
        if other.k != self.k:
            raise ValueError(f"cannot merge {other.k}-class into {self.k}-class matrix")
        self.counts += other.counts


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("empty confusion matrix has no accuracy")
    return float(np.trace(cm.counts)) / cm.total


def per_class_accuracy(cm: ConfusionMatrix):
    """Diagonal over row sums; classes with no samples report None, never 0."""
    out = []
    for c in range(cm.k):
        row = int(cm.counts[c].sum())
        out.append(float(cm.counts[c, c]) / row if row > 0 else None)
    return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float
    wall_seconds: float

    def __post_init__(self):
        if not 0.0 <= self.train_acc <= 1.0 or not 0.0 <= self.val_acc <= 1.0:
            raise ValueError(f"accuracy outside [0, 1] in epoch {self.epoch}")
        if self.train_loss < 0 or self.val_loss < 0:
            raise ValueError(f"negative loss in epoch {self.epoch}")
        if self.lr <= 0:
            raise ValueError(f"non-positive lr in epoch {self.epoch}")


@dataclass
class History:
    config_digest: str = "-"
    records: list = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = "completed"

    def append(self, record: EpochRecord) -> None:
        expected = len(self.records) + 1
        if record.epoch != expected:
            raise ValueError(f"epochs must be consecutive from 1; got {record.epoch}, expected {expected}")
        self.records.append(record)

    def to_json_dict(self) -> dict:
        return {
            "config_digest": self.config_digest,
            "records": [asdict(r) for r in self.records],
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
        }


CSV_FIELDS = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr", "wall_seconds"]


def write_history(history: History, json_path, csv_path=None) -> None:
    Path(json_path).write_text(json.dumps(history.to_json_dict(), indent=2) + "\n", encoding="utf-8")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
            writer.writeheader()
            for r in history.records:
                writer.writerow(asdict(r))


def read_history(json_path) -> History:
    doc = json.loads(Path(json_path).read_text(encoding="utf-8"))
    hist = History(config_digest=doc["config_digest"], best_epoch=doc["best_epoch"],
                   stop_reason=doc["stop_reason"])
    for rec in doc["records"]:
        hist.append(EpochRecord(**rec))
    return hist


def write_confusion(cm: ConfusionMatrix, class_names, path) -> None:
    if len(class_names) != cm.k:
        raise ValueError(f"{len(class_names)} names for a {cm.k}-class matrix")
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["actual\\predicted"] + list(class_names))
        for c, name in enumerate(class_names):
            writer.writerow([name] + cm.counts[c].tolist())


def summary_line(history: History) -> str:
    """Run summary in the four-field logging format."""
    n = len(history.records)
    total = sum(r.wall_seconds for r in history.records)
    per_epoch = total / n if n else 0.0
    best = history.records[history.best_epoch - 1].val_acc if history.best_epoch else float("nan")
    return (
        f"epochs_trained={n} total_time={total:.1f}s "
        f"time_per_epoch={per_epoch:.1f}s accuracy={100.0 * best:.2f}%"
    )

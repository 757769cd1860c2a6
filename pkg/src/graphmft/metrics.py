"""Accuracy, per-class and support-weighted F1, confusion matrix."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np


@dataclass
class Metrics:
    accuracy: float
    per_class_f1: list[float]
    weighted_f1: float
    confusion: list[list[int]]

    @property
    def support(self) -> list[int]:
        return [int(sum(row)) for row in self.confusion]

    @property
    def num_classes(self) -> int:
        return len(self.confusion)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "per_class_f1": list(self.per_class_f1),
            "support": self.support,
            "confusion": [list(r) for r in self.confusion],
        }

    def to_json(self, **extra) -> str:
        obj = self.to_dict()
        obj.update(extra)
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"

    def confusion_csv(self, class_names: list[str] | None = None) -> str:
        names = class_names or [str(i) for i in range(self.num_classes)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + names)
        for name, row in zip(names, self.confusion):
            w.writerow([name] + list(row))
        return buf.getvalue()

    def report(self, class_names: list[str] | None = None) -> str:
        """One-row table in percent: per-class F1, then Acc and wa-F1."""
        names = class_names or [f"c{i}" for i in range(self.num_classes)]
        head = [f"{n} F1" for n in names] + ["Acc", "wa-F1"]
        vals = [f"{100 * f:.2f}" for f in self.per_class_f1] + [f"{100 * self.accuracy:.2f}", f"{100 * self.weighted_f1:.2f}"]
        widths = [max(len(a), len(b)) for a, b in zip(head, vals)]
        return "\n".join(" | ".join(x.rjust(w) for x, w in zip(row, widths)) for row in (head, vals))


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.intp)
    y_pred = np.asarray(y_pred, dtype=np.intp)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def compute_metrics(y_true, y_pred, num_classes: int) -> Metrics:
    y_true = np.asarray(y_true)
    if y_true.size == 0:
        raise ValueError("cannot compute metrics on an empty set")
    cm = confusion_matrix(y_true, y_pred, num_classes)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    total = support.sum()
    return Metrics(
        accuracy=float(tp.sum() / total),
        per_class_f1=[float(x) for x in f1],
        weighted_f1=float((support / total * f1).sum()),
        confusion=cm.tolist(),
    )

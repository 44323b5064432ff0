"""Confusion counts, accuracy/precision/recall/F1, weighted reports, improvement deltas.

Conventions, fixed for the whole benchmark:

* metrics with a zero denominator are 0 (recorded in the report's ``notes``),
* the "weighted accuracy" column reports global accuracy (fraction of exact
  matches); for binary gold with binary predictions this coincides with the
  support-weighted per-class accuracy,
* labels that occur only in predictions (e.g. the abstain code -1) get a
  confusion-matrix column and a zero-support class row, so they count against
  accuracy and recall but carry zero weight in the averages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

REPORT_FORMAT_VERSION = 1


class MetricsError(ValueError):
    pass


class LengthMismatch(MetricsError):
    pass


class UnknownGoldLabel(MetricsError):
    pass


class EmptyInput(MetricsError):
    pass


class ZeroBaseline(MetricsError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    """One-vs-rest counts for a single class."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class ClassReport:
    label: object
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class WeightedReport:
    accuracy: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    classes: list[ClassReport]
    labels: list[object]
    confusion: list[list[int]]
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "version": REPORT_FORMAT_VERSION,
            "accuracy": self.accuracy,
            "weighted": {
                "precision": self.weighted_precision,
                "recall": self.weighted_recall,
                "f1": self.weighted_f1,
            },
            "classes": [
                {
                    "label": c.label,
                    "precision": c.precision,
                    "recall": c.recall,
                    "f1": c.f1,
                    "support": c.support,
                }
                for c in self.classes
            ],
            "labels": list(self.labels),
            "confusion": [list(row) for row in self.confusion],
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "WeightedReport":
        return cls(
            accuracy=d["accuracy"],
            weighted_precision=d["weighted"]["precision"],
            weighted_recall=d["weighted"]["recall"],
            weighted_f1=d["weighted"]["f1"],
            classes=[
                ClassReport(
                    label=c["label"],
                    precision=c["precision"],
                    recall=c["recall"],
                    f1=c["f1"],
                    support=c["support"],
                )
                for c in d["classes"]
            ],
            labels=list(d["labels"]),
            confusion=[list(row) for row in d["confusion"]],
            notes=list(d.get("notes", [])),
        )

    @classmethod
    def from_json(cls, s: str) -> "WeightedReport":
        return cls.from_dict(json.loads(s))


def _ordered_labels(gold: Sequence, pred: Sequence, classes: Sequence | None):
    """Gold classes (in given or sorted order) followed by prediction-only labels."""
    if classes is None:
        gold_labels = sorted(set(gold))
    else:
        gold_labels = list(classes)
    known = set(gold_labels)
    extra = sorted(set(pred) - known)
    return gold_labels, extra


def confusion(
    gold: Sequence, pred: Sequence, classes: Sequence | None = None
) -> tuple[dict[object, ConfusionCounts], list[object], list[list[int]]]:
    """Per-class one-vs-rest counts plus the full matrix.

    Returns (counts_by_label, labels, matrix) where matrix[i][j] counts pairs
    with gold = labels[i] and pred = labels[j]. Rows for prediction-only
    labels are all zero.
    """
    if len(gold) != len(pred):
        raise LengthMismatch(f"gold has {len(gold)} items, pred has {len(pred)}")
    if len(gold) == 0:
        raise EmptyInput("no samples")
    gold_labels, extra = _ordered_labels(gold, pred, classes)
    known = set(gold_labels)
    for g in gold:
        if g not in known:
            raise UnknownGoldLabel(f"gold label {g!r} not in classes {gold_labels!r}")
    labels = gold_labels + extra
    index = {lab: i for i, lab in enumerate(labels)}
    n = len(labels)
    matrix = [[0] * n for _ in range(n)]
    for g, p in zip(gold, pred):
        j = index.get(p)
        if j is None:
            # unseen prediction label when classes was given explicitly
            labels.append(p)
            index[p] = len(labels) - 1
            for row in matrix:
                row.append(0)
            matrix.append([0] * len(labels))
            j = index[p]
            n = len(labels)
        matrix[index[g]][j] += 1
    total = len(gold)
    counts: dict[object, ConfusionCounts] = {}
    for lab in labels:
        i = index[lab]
        tp = matrix[i][i]
        fn = sum(matrix[i]) - tp
        fp = sum(matrix[r][i] for r in range(len(labels))) - tp
        tn = total - tp - fn - fp
        counts[lab] = ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)
    return counts, labels, matrix


def accuracy(counts: ConfusionCounts) -> float:
    """(TP + TN) / (TP + TN + FP + FN)."""
    if counts.total == 0:
        raise EmptyInput("no samples in counts")
    return (counts.tp + counts.tn) / counts.total


def precision(counts: ConfusionCounts) -> float:
    denom = counts.tp + counts.fp
    return counts.tp / denom if denom else 0.0


def recall(counts: ConfusionCounts) -> float:
    denom = counts.tp + counts.fn
    return counts.tp / denom if denom else 0.0


def f1(prec: float, rec: float) -> float:
    denom = prec + rec
    return 2.0 * prec * rec / denom if denom else 0.0


def weighted_report(
    gold: Sequence, pred: Sequence, classes: Sequence | None = None
) -> WeightedReport:
    counts, labels, matrix = confusion(gold, pred, classes)
    total = len(gold)
    support = {lab: 0 for lab in labels}
    for g in gold:
        support[g] += 1

    notes: list[str] = []
    class_reports: list[ClassReport] = []
    w_prec = w_rec = w_f1 = 0.0
    for lab in labels:
        c = counts[lab]
        p = precision(c)
        r = recall(c)
        f = f1(p, r)
        if c.tp + c.fp == 0:
            notes.append(f"precision undefined for class {lab!r}; reported as 0")
        if c.tp + c.fn == 0:
            notes.append(f"recall undefined for class {lab!r}; reported as 0")
        s = support[lab]
        class_reports.append(ClassReport(label=lab, precision=p, recall=r, f1=f, support=s))
        w = s / total
        w_prec += w * p
        w_rec += w * r
        w_f1 += w * f

    acc = sum(1 for g, p in zip(gold, pred) if g == p) / total
    return WeightedReport(
        accuracy=acc,
        weighted_precision=w_prec,
        weighted_recall=w_rec,
        weighted_f1=w_f1,
        classes=class_reports,
        labels=labels,
        confusion=matrix,
        notes=notes,
    )


def improvement_delta(f1_new: Sequence[float], f1_baseline: Sequence[float]) -> float:
    """Mean relative F1 change in percent: mean_i 100*(new_i - base_i)/base_i."""
    if len(f1_new) != len(f1_baseline):
        raise LengthMismatch(
            f"{len(f1_new)} new scores vs {len(f1_baseline)} baseline scores"
        )
    if len(f1_new) == 0:
        raise EmptyInput("no scores")
    for b in f1_baseline:
        if b <= 0:
            raise ZeroBaseline(f"baseline score {b!r} is not positive")
    return sum(100.0 * (n - b) / b for n, b in zip(f1_new, f1_baseline)) / len(f1_new)


def render_confusion(labels: Sequence, matrix: Sequence[Sequence[int]]) -> str:
    """Plain-text confusion matrix, gold labels as rows."""
    names = [str(lab) for lab in labels]
    width = max(len(s) for s in names + ["gold\\pred"])
    cell = max(width, max(len(str(v)) for row in matrix for v in row))
    header = "gold\\pred".ljust(width) + " " + " ".join(s.rjust(cell) for s in names)
    lines = [header]
    for name, row in zip(names, matrix):
        lines.append(name.ljust(width) + " " + " ".join(str(v).rjust(cell) for v in row))
    return "\n".join(lines)

"""Evaluation metrics for the 3-label / 8-joint-class task and mask IoU.

Joint index encoding puts the whistle bit first:
``index = 4*y_whistle + 2*y_beluga + y_porpoise``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

CLASS_NAMES = ("whistle", "beluga", "porpoise")
SCHEMA_VERSION = 1


def label_to_joint(y) -> int:
    y = tuple(int(v) for v in y)
    if len(y) != 3 or any(v not in (0, 1) for v in y):
        raise ValueError(f"label vector must be three 0/1 values, got {y}")
    return 4 * y[0] + 2 * y[1] + y[2]


def joint_to_label(j: int) -> tuple[int, int, int]:
    j = int(j)
    if not 0 <= j < 8:
        raise ValueError(f"joint class index {j} outside [0, 8)")
    return (j >> 2) & 1, (j >> 1) & 1, j & 1


def _labels(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError("expected an (N, 3) array of label vectors")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("label vectors must be binary")
    return arr


def _pair(preds, truth) -> tuple[np.ndarray, np.ndarray]:
    p, t = _labels(preds), _labels(truth)
    if len(p) != len(t):
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(t)} labels")
    if len(p) == 0:
        raise ValueError("empty input")
    return p, t


def joints(labels) -> np.ndarray:
    return _labels(labels) @ np.array([4, 2, 1])


def joint_accuracy(preds, truth) -> float:
    p, t = _pair(preds, truth)
    return float(np.all(p == t, axis=1).mean())


def hamming_loss(preds, truth, mode: str) -> float:
    """``multilabel``: mean fraction of wrong components; ``multiclass``: mean joint-index error."""
    p, t = _pair(preds, truth)
    if mode == "multilabel":
        return float((p != t).mean())
    if mode == "multiclass":
        return float(np.any(p != t, axis=1).mean())
    raise ValueError(f"hamming_loss needs mode 'multilabel' or 'multiclass', got {mode!r}")


def per_class_prf(preds, truth) -> tuple[list[tuple[float, float, float]], float]:
    """Binary precision/recall/F1 per class plus macro-F1 (0 on zero division)."""
    p, t = _pair(preds, truth)
    out = []
    for k in range(3):
        tp = int(np.sum((p[:, k] == 1) & (t[:, k] == 1)))
        fp = int(np.sum((p[:, k] == 1) & (t[:, k] == 0)))
        fn = int(np.sum((p[:, k] == 0) & (t[:, k] == 1)))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out.append((prec, rec, f1))
    return out, float(np.mean([f for _, _, f in out]))


def confusion_matrix_8(preds, truth, normalize: bool = False) -> np.ndarray:
    """counts[true_joint, pred_joint]; ``normalize`` divides by N."""
    p, t = _pair(preds, truth)
    cm = np.zeros((8, 8), dtype=np.int64)
    np.add.at(cm, (joints(t), joints(p)), 1)
    return cm / len(p) if normalize else cm


def iou(a, b) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def pooled_iou(preds, truths) -> float:
    """IoU with intersections and unions summed over a whole set of masks."""
    inter = union = 0
    for a, b in zip(preds, truths):
        a = np.asarray(a).astype(bool)
        b = np.asarray(b).astype(bool)
        inter += int(np.logical_and(a, b).sum())
        union += int(np.logical_or(a, b).sum())
    return 1.0 if union == 0 else inter / union


@dataclass
class MetricsReport:
    joint_accuracy: float
    hamming_multilabel: float
    hamming_multiclass: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    macro_f1: float
    confusion: list[list[int]]
    n_samples: int
    meta: dict = field(default_factory=dict)  # model / fusion / mask source / distributions
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str, source: str = "<report>") -> "MetricsReport":
        data = json.loads(text)
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"{source}: metrics schema version {data.get('schema_version')} != {SCHEMA_VERSION}")
        missing = [f for f in cls.__dataclass_fields__ if f not in data]
        if missing:
            raise ValueError(f"{source}: metrics report missing fields {missing} (schema {SCHEMA_VERSION})")
        return cls(**{k: data[k] for k in cls.__dataclass_fields__})


def evaluate(preds, truth, meta: dict | None = None) -> MetricsReport:
    prf, macro = per_class_prf(preds, truth)
    return MetricsReport(
        joint_accuracy=joint_accuracy(preds, truth),
        hamming_multilabel=hamming_loss(preds, truth, "multilabel"),
        hamming_multiclass=hamming_loss(preds, truth, "multiclass"),
        precision=[x[0] for x in prf],
        recall=[x[1] for x in prf],
        f1=[x[2] for x in prf],
        macro_f1=macro,
        confusion=confusion_matrix_8(preds, truth).tolist(),
        n_samples=len(np.asarray(preds)),
        meta=dict(meta or {}),
    )

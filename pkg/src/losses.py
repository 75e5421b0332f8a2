"""
Balanced softmax multi-task loss and the evaluation metrics (ACC, AUC, SPE, SEN,
confusion matrices, ROC curves).
"""
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from src.config import TASKS, Task
from src.errors import ConfigError, EmptyInputError, ShapeError
from src.nn import as_tensor2, log_softmax, softmax


# === Losses ===
def class_counts(labels, num_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=int), minlength=num_classes).astype(float)


def _check_labels(labels, batch: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if labels.shape[0] != batch:
        raise ShapeError(f"{labels.shape[0]} labels for {batch} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigError(f"labels must lie in [0, {num_classes})")
    return labels


def balanced_softmax_loss(logits, labels, counts, smoothing: bool = False) -> Tuple[float, np.ndarray]:
    """
    Cross-entropy on logits shifted by log class counts, averaged over rows.

    Returns (loss, d_loss/d_logits). A zero count is a ConfigError unless
    `smoothing` adds one to every count.
    """
    logits = as_tensor2(logits, "logits")
    B, C = logits.shape
    counts = np.asarray(counts, dtype=float).reshape(-1)
    if counts.shape[0] != C:
        raise ShapeError(f"{counts.shape[0]} class counts for {C} logits")
    if smoothing:
        counts = counts + 1.0
    if np.any(counts <= 0):
        raise ConfigError(f"class counts must be positive, got {counts.tolist()}")
    labels = _check_labels(labels, B, C)
    if B == 0:
        raise EmptyInputError("balanced softmax over an empty batch")

    shifted = logits + np.log(counts)
    log_p = log_softmax(shifted, axis=1)
    rows = np.arange(B)
    loss = float(-np.mean(log_p[rows, labels]))
    d_logits = np.exp(log_p)
    d_logits[rows, labels] -= 1.0
    return loss, d_logits / B


@dataclass
class PredictionSet:
    """Per-task logits for a batch of subjects."""
    logits: Dict[Task, np.ndarray]
    ids: List[str] = field(default_factory=list)

    def probabilities(self, task: Task) -> np.ndarray:
        return softmax(self.logits[task], axis=1)

    def predictions(self, task: Task) -> np.ndarray:
        return np.argmax(self.logits[task], axis=1)

    def __len__(self) -> int:
        return next(iter(self.logits.values())).shape[0]

    def to_frame(self) -> pd.DataFrame:
        data: Dict[str, object] = {"id": self.ids or list(range(len(self)))}
        for task in TASKS:
            probs = self.probabilities(task)
            for c in range(probs.shape[1]):
                data[f"{task.value}_p{c}"] = probs[:, c]
            data[f"{task.value}_pred"] = self.predictions(task)
        return pd.DataFrame(data)


def total_loss(
    pred: PredictionSet,
    labels: Mapping[Task, np.ndarray],
    counts: Mapping[Task, np.ndarray],
    smoothing: bool = False,
) -> Tuple[float, Dict[Task, float], Dict[Task, np.ndarray]]:
    """Unweighted sum of the per-task balanced softmax terms."""
    per_task: Dict[Task, float] = {}
    d_logits: Dict[Task, np.ndarray] = {}
    for task in TASKS:
        if task not in pred.logits:
            raise ShapeError(f"missing logits for task {task.value}")
        per_task[task], d_logits[task] = balanced_softmax_loss(
            pred.logits[task], labels[task], counts[task], smoothing=smoothing
        )
    return float(sum(per_task.values())), per_task, d_logits


# === ROC ===
def roc_auc(scores, labels) -> Optional[float]:
    """
    Probability that a random positive outscores a random negative, ties
    counting one half. None when only one class is present.
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)   # average ranks give ties half credit
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_points(scores, labels) -> pd.DataFrame:
    """ROC vertices, one per distinct threshold, starting at (0, 0) with threshold +inf."""
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = max(int(labels.sum()), 1)
    n_neg = max(int((~labels).sum()), 1)
    thresholds = np.concatenate([[np.inf], np.unique(scores)[::-1]])
    rows = []
    for t in thresholds:
        hit = scores >= t
        rows.append({
            "threshold": t,
            "fpr": float(np.sum(hit & ~labels)) / n_neg,
            "tpr": float(np.sum(hit & labels)) / n_pos,
        })
    return pd.DataFrame(rows)


# === Classification Metrics ===
def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    cm = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


def _ratio(num: float, den: float) -> Optional[float]:
    return float(num) / float(den) if den > 0 else None


def _mean_defined(values) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


@dataclass
class TaskMetrics:
    acc: float
    auc: Optional[float]
    spe: Optional[float]
    sen: Optional[float]
    n: int
    confusion: np.ndarray
    class_sensitivity: List[Optional[float]]


def task_metrics(probs: np.ndarray, labels) -> TaskMetrics:
    """
    Binary: AUC on the positive-class probability, SEN/SPE from the confusion
    matrix. Multi-class: micro ACC and SEN, macro one-vs-rest AUC, macro SPE.
    """
    probs = as_tensor2(probs, "probs")
    n, C = probs.shape
    labels = _check_labels(labels, n, C)
    pred = np.argmax(probs, axis=1)
    cm = confusion_matrix(labels, pred, C)
    acc = float(np.trace(cm)) / n
    tp = np.diag(cm)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    tn = n - tp - fn - fp
    class_sen = [_ratio(tp[c], tp[c] + fn[c]) for c in range(C)]
    class_spe = [_ratio(tn[c], tn[c] + fp[c]) for c in range(C)]

    if C == 2:
        auc = roc_auc(probs[:, 1], labels == 1)
        sen, spe = class_sen[1], class_spe[1]
    else:
        auc = _mean_defined(roc_auc(probs[:, c], labels == c) for c in range(C))
        sen = acc
        spe = _mean_defined(class_spe)
    return TaskMetrics(acc=acc, auc=auc, spe=spe, sen=sen, n=n, confusion=cm, class_sensitivity=class_sen)


@dataclass
class MetricsReport:
    tasks: Dict[Task, TaskMetrics]
    n: int

    @property
    def mean_auc(self) -> Optional[float]:
        """Average of the per-task AUCs (macro over tasks)."""
        return _mean_defined(m.auc for m in self.tasks.values())

    def rows(self, split: str) -> List[Dict[str, object]]:
        return [
            {"split": split, "task": task.value, "acc": m.acc, "auc": m.auc, "spe": m.spe, "sen": m.sen, "n": m.n}
            for task, m in self.tasks.items()
        ]

    def to_frame(self, split: str) -> pd.DataFrame:
        return pd.DataFrame(self.rows(split), columns=["split", "task", "acc", "auc", "spe", "sen", "n"])


def compute_metrics(preds: PredictionSet, labels: Mapping[Task, np.ndarray]) -> MetricsReport:
    if len(preds) == 0:
        raise EmptyInputError("cannot compute metrics on an empty set")
    tasks = {task: task_metrics(preds.probabilities(task), labels[task]) for task in TASKS}
    return MetricsReport(tasks=tasks, n=len(preds))


# === Tables ===
def confusion_frame(report: MetricsReport, split: str) -> pd.DataFrame:
    """Long-format confusion matrices: one row per (task, true, predicted) cell."""
    rows = []
    for task, m in report.tasks.items():
        C = m.confusion.shape[0]
        for t in range(C):
            for p in range(C):
                rows.append({"split": split, "task": task.value, "true": t, "pred": p, "count": int(m.confusion[t, p])})
    return pd.DataFrame(rows)


def roc_frame(preds: PredictionSet, labels: Mapping[Task, np.ndarray], split: str) -> pd.DataFrame:
    """ROC vertices per task and positive class (binary tasks use class 1 only)."""
    frames = []
    for task in TASKS:
        probs = preds.probabilities(task)
        truth = np.asarray(labels[task], dtype=int)
        classes = [1] if task.num_classes == 2 else list(range(task.num_classes))
        for c in classes:
            points = roc_points(probs[:, c], truth == c)
            points.insert(0, "class", c)
            points.insert(0, "task", task.value)
            points.insert(0, "split", split)
            frames.append(points)
    return pd.concat(frames, ignore_index=True)


def class_sensitivity_frame(report: MetricsReport, split: str) -> pd.DataFrame:
    return pd.DataFrame([
        {"split": split, "task": task.value, "class": c, "sen": s}
        for task, m in report.tasks.items()
        for c, s in enumerate(m.class_sensitivity)
    ])

"""Evaluation metrics: completion rate, regression error, classification agreement, ROC AUC."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from tissueflow.errors import EmptyInput, SingleClass, UnknownLabel


def _check_pair(truth, pred) -> None:
    if len(truth) != len(pred):
        raise ValueError(f"length mismatch: {len(truth)} truth vs {len(pred)} predictions")
    if len(truth) == 0:
        raise EmptyInput("no items to score")


def tcr(flags: Sequence[bool]) -> float:
    """Task completion rate: successful tasks over all tasks."""
    if len(flags) == 0:
        raise EmptyInput("no tasks")
    return sum(bool(f) for f in flags) / len(flags)


@dataclass(frozen=True)
class RegressionMetrics:
    mae: float
    rmse: float
    pearson_r: float | None     # None when either side has zero variance


def regression_metrics(truth: Sequence[float], pred: Sequence[float]) -> RegressionMetrics:
    _check_pair(truth, pred)
    t = np.asarray(truth, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    err = p - t
    mae = float(np.mean(np.abs(err)))
    # scale first so tiny residuals do not underflow when squared
    scale = float(np.max(np.abs(err)))
    rmse = scale * math.sqrt(float(np.mean((err / scale) ** 2))) if scale > 0 else 0.0
    tc = t - t.mean()
    pc = p - p.mean()
    stt = float(np.dot(tc, tc))
    spp = float(np.dot(pc, pc))
    r = None
    if stt > 0 and spp > 0:
        r = float(np.dot(tc, pc)) / (math.sqrt(stt) * math.sqrt(spp))
        r = max(-1.0, min(1.0, r))
    return RegressionMetrics(mae, rmse, r)


@dataclass(frozen=True, eq=False)
class ClassificationMetrics:
    classes: tuple
    confusion: np.ndarray       # rows: truth, columns: prediction
    accuracy: float
    precision: dict
    recall: dict
    f1: dict
    support: dict
    weighted_f1: float
    mcc: float | None           # binary only; None for multi-class or a zero denominator
    kappa: float | None         # None when chance agreement is 1


def confusion_matrix(truth: Sequence, pred: Sequence, classes: Sequence) -> np.ndarray:
    _check_pair(truth, pred)
    index = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(truth, pred):
        if t not in index or p not in index:
            bad = t if t not in index else p
            raise UnknownLabel(f"label {bad!r} not in class set {list(classes)}")
        cm[index[t], index[p]] += 1
    return cm


def _ratio(num: float, den: float) -> float:
    # undefined precision/recall/F1 (empty denominator) are scored 0
    return num / den if den else 0.0


def binary_mcc(tp: int, tn: int, fp: int, fn: int) -> float | None:
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        return None
    return (tp * tn - fp * fn) / math.sqrt(den)


def cohen_kappa(cm: np.ndarray) -> float | None:
    n = cm.sum()
    p_o = np.trace(cm) / n
    p_e = float(np.dot(cm.sum(axis=1), cm.sum(axis=0))) / (n * n)
    if p_e == 1.0:
        return None
    return float((p_o - p_e) / (1.0 - p_e))


def classification_metrics(truth: Sequence, pred: Sequence,
                           classes: Sequence | None = None) -> ClassificationMetrics:
    """Confusion-matrix based scores; for two classes the second one is positive."""
    if classes is None:
        classes = sorted(set(truth) | set(pred))
    classes = tuple(classes)
    cm = confusion_matrix(truth, pred, classes)
    n = int(cm.sum())
    precision, recall, f1, support = {}, {}, {}, {}
    for i, c in enumerate(classes):
        tp = int(cm[i, i])
        precision[c] = _ratio(tp, int(cm[:, i].sum()))
        recall[c] = _ratio(tp, int(cm[i, :].sum()))
        f1[c] = _ratio(2 * precision[c] * recall[c], precision[c] + recall[c])
        support[c] = int(cm[i, :].sum())
    weighted = sum(support[c] * f1[c] for c in classes) / n
    mcc = None
    if len(classes) == 2:
        tn, fp, fn, tp = (int(v) for v in cm.ravel())
        mcc = binary_mcc(tp, tn, fp, fn)
    return ClassificationMetrics(classes, cm, float(np.trace(cm)) / n, precision, recall, f1,
                                 support, float(weighted), mcc, cohen_kappa(cm))


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    start = 0
    while start < len(values):
        stop = start + 1
        while stop < len(values) and sorted_vals[stop] == sorted_vals[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + 1 + stop)
        start = stop
    return ranks


def roc_auc(truth: Sequence, scores: Sequence[float], positive=1) -> float:
    """Area under the ROC curve from the rank-sum statistic; ties count one half."""
    _check_pair(truth, scores)
    pos = np.array([t == positive for t in truth])
    n1 = int(pos.sum())
    n0 = len(pos) - n1
    if n1 == 0 or n0 == 0:
        raise SingleClass("ROC AUC needs both positive and negative items")
    ranks = midranks(np.asarray(scores, dtype=np.float64))
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


# -- reports ---------------------------------------------------------------


def report_rows(result) -> list[tuple[str, float | None]]:
    """Flatten a metrics result to ``(name, value)`` rows; absent values stay ``None``."""
    if isinstance(result, RegressionMetrics):
        return [("mae", result.mae), ("rmse", result.rmse), ("pearson_r", result.pearson_r)]
    if isinstance(result, ClassificationMetrics):
        rows = [("accuracy", result.accuracy), ("weighted_f1", result.weighted_f1),
                ("mcc", result.mcc), ("kappa", result.kappa)]
        for c in result.classes:
            rows += [(f"precision[{c}]", result.precision[c]), (f"recall[{c}]", result.recall[c]),
                     (f"f1[{c}]", result.f1[c]), (f"support[{c}]", float(result.support[c]))]
        return rows
    if isinstance(result, dict):
        return list(result.items())
    raise TypeError(f"cannot report {type(result).__name__}")


def format_report(rows: list[tuple[str, float | None]]) -> str:
    lines = ["metric\tvalue"]
    for name, value in rows:
        lines.append(f"{name}\t{'NA' if value is None else repr(float(value))}")
    return "\n".join(lines) + "\n"


def write_report(store, name: str, rows: list[tuple[str, float | None]],
                 actor: str = "metrics") -> str:
    """Store rows as a ``(n, 1)`` float64 table; names go in the ``metrics`` attr, NaN = absent."""
    dataset = f"table_metrics_{name}"
    values = np.array([[np.nan if v is None else float(v)] for _, v in rows], dtype=np.float64)
    store.write_array(dataset, values.reshape(len(rows), 1),
                      attrs={"metrics": ",".join(n for n, _ in rows)}, actor=actor)
    return dataset


def _column(store, name: str) -> np.ndarray:
    arr = store.read_array(name)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ValueError(f"{name}: expected a single column, got shape {arr.shape}")
    return arr


def metrics_from_store(store, truth: str, pred: str, kind: str):
    """Score two single-column datasets; ``kind`` is regression, classification or auc."""
    t = _column(store, truth)
    p = _column(store, pred)
    if kind == "regression":
        return regression_metrics(t, p)
    if kind == "classification":
        return classification_metrics(t.tolist(), p.tolist())
    if kind == "auc":
        return {"roc_auc": roc_auc(t.tolist(), p)}
    raise ValueError(f"unknown metrics kind {kind!r}")

"""Class-imbalance aware classification metrics.

Averages run over the classes present in ``y_true`` only; predictions of
other classes still count as errors but the class itself gets no weight.
"""

from __future__ import annotations

import logging

import numpy as np
import numpy.typing as npt
from scipy.stats import rankdata

IntArray = npt.NDArray[np.int64]


def _check_lengths(y_true: npt.ArrayLike, other: npt.ArrayLike) -> tuple[IntArray, npt.NDArray[np.generic]]:
    truth = np.asarray(y_true, dtype=np.int64)
    values = np.asarray(other)
    if len(truth) != len(values):
        raise ValueError(f"length mismatch: {len(truth)} labels vs {len(values)} predictions")
    if len(truth) == 0:
        raise ValueError("metrics need at least one sample")
    return truth, values


def _warn_absent(present: IntArray, seen: IntArray) -> None:
    absent = np.setdiff1d(seen, present)
    if absent.size:
        logging.warning("classes %s do not occur in y_true and are excluded from averaging", absent.tolist())


def confusion_matrix(y_true: npt.ArrayLike, y_pred: npt.ArrayLike, classes: IntArray) -> IntArray:
    truth, pred = _check_lengths(y_true, y_pred)
    index = {int(c): i for i, c in enumerate(classes)}
    matrix = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(truth, pred.astype(np.int64)):
        if int(t) in index and int(p) in index:
            matrix[index[int(t)], index[int(p)]] += 1
    return matrix


def balanced_accuracy(y_true: npt.ArrayLike, y_pred: npt.ArrayLike) -> float:
    """Unweighted mean of per-class recall."""
    truth, pred = _check_lengths(y_true, y_pred)
    pred = pred.astype(np.int64)
    present = np.unique(truth)
    _warn_absent(present, np.unique(pred))
    recalls = [float(np.mean(pred[truth == c] == c)) for c in present]
    return float(np.mean(recalls))


def f1_weighted(y_true: npt.ArrayLike, y_pred: npt.ArrayLike) -> float:
    """Support-weighted mean of per-class F1."""
    truth, pred = _check_lengths(y_true, y_pred)
    pred = pred.astype(np.int64)
    present, support = np.unique(truth, return_counts=True)
    _warn_absent(present, np.unique(pred))
    scores = []
    for c in present:
        tp = float(np.sum((pred == c) & (truth == c)))
        predicted = float(np.sum(pred == c))
        actual = float(np.sum(truth == c))
        precision = tp / predicted if predicted else 0.0
        recall = tp / actual
        scores.append(2.0 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return float(np.average(scores, weights=support))


def auroc_binary(positive: npt.NDArray[np.bool_], scores: npt.NDArray[np.float64]) -> float:
    """Mann-Whitney AUROC; tied scores earn half credit."""
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative samples")
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc_weighted(
    y_true: npt.ArrayLike, probs: npt.ArrayLike, classes: npt.ArrayLike | None = None
) -> float:
    """One-vs-rest AUROC averaged with class-support weights.

    ``classes`` labels the columns of ``probs`` and defaults to 0..C-1.
    """
    truth, scores = _check_lengths(y_true, probs)
    scores = scores.astype(np.float64)
    if scores.ndim != 2:
        raise ValueError(f"probs must be (N, C), got shape {scores.shape}")
    columns = np.arange(scores.shape[1]) if classes is None else np.asarray(classes, dtype=np.int64)
    if len(columns) != scores.shape[1]:
        raise ValueError(f"{len(columns)} class labels for {scores.shape[1]} probability columns")
    present, support = np.unique(truth, return_counts=True)
    if len(present) < 2:
        raise ValueError("AUROC needs at least two classes in y_true")
    _warn_absent(present, columns)
    column_of = {int(c): i for i, c in enumerate(columns)}
    values = []
    for c in present:
        column = scores[:, column_of[int(c)]] if int(c) in column_of else np.zeros(len(truth))
        values.append(auroc_binary(truth == c, column))
    return float(np.average(values, weights=support))

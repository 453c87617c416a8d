"""Class-imbalance-robust evaluation: F1-macro, rank AUC, GMean."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError


@dataclass
class MetricsReport:
    f1_macro: float
    auc: float
    gmean: float
    tp: int
    fp: int
    tn: int
    fn: int
    precision: dict[int, float]
    recall: dict[int, float]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["precision"] = {str(k): v for k, v in d["precision"].items()}
        d["recall"] = {str(k): v for k, v in d["recall"].items()}
        return d


def auc_rank(scores, labels) -> float:
    """Rank-statistic AUC: average ranks, so ties count one half.

    Equals the probability that a uniformly random positive outranks a
    uniformly random negative.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gmean(tp: int, fn: int, tn: int, fp: int) -> float:
    """Geometric mean of the true-positive and true-negative rates."""
    if tp + fn < 1 or tn + fp < 1:
        raise UndefinedMetricError("GMean needs members of both classes")
    tpr = tp / (tp + fn)
    tnr = tn / (tn + fp)
    return math.sqrt(tpr * tnr)


def f1_macro(preds, labels) -> float:
    """Unweighted mean of per-class F1; empty precision/recall count as 0."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    f1s = []
    for cls in (0, 1):
        tp = int(((preds == cls) & (labels == cls)).sum())
        fp = int(((preds == cls) & (labels != cls)).sum())
        fn = int(((preds != cls) & (labels == cls)).sum())
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))


def compute_report(scores, preds, labels) -> MetricsReport:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    tp = int(((preds == 1) & (labels == 1)).sum())
    fp = int(((preds == 1) & (labels == 0)).sum())
    tn = int(((preds == 0) & (labels == 0)).sum())
    fn = int(((preds == 0) & (labels == 1)).sum())
    precision = {}
    recall = {}
    for cls, (t, f_pred, f_true) in {1: (tp, fp, fn), 0: (tn, fn, fp)}.items():
        precision[cls] = t / (t + f_pred) if t + f_pred else 0.0
        recall[cls] = t / (t + f_true) if t + f_true else 0.0
    return MetricsReport(
        f1_macro=f1_macro(preds, labels),
        auc=auc_rank(scores, labels),
        gmean=gmean(tp, fn, tn, fp),
        tp=tp, fp=fp, tn=tn, fn=fn,
        precision=precision,
        recall=recall,
    )

"""Evaluation metrics: accuracy, ranking AUCs, and per-round aggregation.

roc_auc uses the rank-sum (Mann-Whitney) formulation with ties counted as
one half, which coincides with trapezoidal ROC integration. pr_auc is
average precision over the descending-score step curve. Metrics that are
undefined for a label set (single class, missing positives) return None
rather than a fabricated value, and aggregation skips absent entries.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


def accuracy(pred_labels, clean_labels) -> float:
    pred = np.asarray(pred_labels)
    clean = np.asarray(clean_labels)
    if pred.shape != clean.shape or pred.ndim != 1 or pred.size == 0:
        raise ConfigError("accuracy needs two equal-length non-empty label vectors")
    return float((pred == clean).mean())


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ordered = values[order]
    starts = np.flatnonzero(np.r_[True, ordered[1:] != ordered[:-1]])
    bounds = np.r_[starts, values.size]
    ranks_sorted = np.empty(values.size)
    for s, e in zip(bounds[:-1], bounds[1:]):
        ranks_sorted[s:e] = 0.5 * (s + e - 1) + 1.0
    ranks = np.empty(values.size)
    ranks[order] = ranks_sorted
    return ranks


def roc_auc(scores, labels) -> float | None:
    """P(random positive outranks random negative), ties counted 1/2.

    Returns None when only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ConfigError("scores and labels must be equal-length vectors")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pr_auc(scores, labels) -> float | None:
    """Average precision over the descending-score step curve.

    Tied scores enter at one threshold. Returns None with zero positives.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ConfigError("scores and labels must be equal-length vectors")
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-s, kind="mergesort")
    s_ord = s[order]
    y_ord = y[order]
    boundaries = np.flatnonzero(np.r_[s_ord[1:] != s_ord[:-1], True])
    tp = np.cumsum(y_ord)[boundaries]
    retrieved = boundaries + 1.0
    precision = tp / retrieved
    recall = tp / n_pos
    recall_steps = np.diff(np.r_[0.0, recall])
    return float((recall_steps * precision).sum())


def multiclass_roc_auc(prob_matrix, labels) -> float | None:
    """Unweighted macro mean of one-vs-rest roc_auc per class.

    Returns None when any class has no example in `labels`.
    """
    probs = np.asarray(prob_matrix, dtype=np.float64)
    y = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] != y.size:
        raise ConfigError("probability matrix rows must match label count")
    per_class = []
    for c in range(probs.shape[1]):
        auc = roc_auc(probs[:, c], (y == c).astype(int))
        if auc is None:
            return None
        per_class.append(auc)
    return float(np.mean(per_class))


@dataclass(frozen=True)
class EvalResult:
    """Cross-client evaluation snapshot for one round.

    Aggregate fields are unweighted means over the clients that reported a
    value; metrics absent everywhere stay None.
    """

    accuracy: float
    roc_auc: float | None
    pr_auc: float | None
    mean_sl_loss: float
    per_client: dict = field(default_factory=dict)

    @staticmethod
    def from_per_client(per_client: dict) -> "EvalResult":
        """Build the aggregate from {client_id: (acc, roc, pr, sl)} entries."""
        if not per_client:
            raise ConfigError("at least one client result required")

        def mean_of(idx):
            vals = [v[idx] for v in per_client.values() if v[idx] is not None]
            return float(np.mean(vals)) if vals else None

        acc = mean_of(0)
        if acc is None:
            raise ConfigError("accuracy must be present for every client")
        return EvalResult(acc, mean_of(1), mean_of(2), mean_of(3), dict(per_client))

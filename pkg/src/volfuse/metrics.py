"""Binary-classification metrics with pinned tie conventions.

ROC-AUC uses the Mann-Whitney formulation (ties get half credit), which
equals the trapezoidal area under the ROC curve.  Average precision walks
ranks in descending score order with ties broken by stable input order.
Zero denominators yield 0 together with a warning flag on the result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError


@dataclass
class EvalResult:
    acc: float
    precision: float
    recall: float
    f1: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    auc: float | None = None
    ap: float | None = None
    warnings: tuple = field(default_factory=tuple)

    def to_json_dict(self) -> dict:
        return {
            "acc": self.acc,
            "auc": self.auc,
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
            "ap": self.ap,
            "threshold": self.threshold,
            "counts": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
        }


def _validate_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size < 1:
        raise DatasetError("metrics need at least one sample")
    if not np.all((labels == 0) | (labels == 1)):
        raise DatasetError("labels must all be 0 or 1")
    return labels.astype(np.int64)


def confusion_metrics(labels, probs, threshold: float = 0.5) -> EvalResult:
    """Accuracy / precision / recall / F1 at ``prob >= threshold``."""
    labels = _validate_labels(labels)
    probs = np.asarray(probs, dtype=np.float64)
    if not np.all(np.isfinite(probs)):
        raise DatasetError("probabilities must be finite")
    pred = (probs >= threshold).astype(np.int64)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    warnings = []
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        warnings.append("precision denominator is zero")
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        warnings.append("recall denominator is zero")
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        warnings.append("f1 denominator is zero")
    acc = (tp + tn) / labels.size
    return EvalResult(acc=acc, precision=precision, recall=recall, f1=f1,
                      threshold=threshold, tp=tp, fp=fp, tn=tn, fn=fn,
                      warnings=tuple(warnings))


def f1_from_pr(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall)


def roc_auc(labels, scores) -> float:
    """P(score+ > score-) + 0.5 * P(tie) over all positive/negative pairs."""
    labels = _validate_labels(labels)
    scores = np.asarray(scores, dtype=np.float64)
    npos = int(labels.sum())
    nneg = labels.size - npos
    if npos == 0 or nneg == 0:
        raise DatasetError("roc_auc requires both classes present")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(labels.size, dtype=np.float64)
    i = 0
    while i < labels.size:
        j = i
        while j + 1 < labels.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - npos * (npos + 1) / 2.0) / (npos * nneg))


def average_precision(labels, scores) -> float:
    """Sum of (R_k - R_{k-1}) * P_k over descending ranks; stable tie order."""
    labels = _validate_labels(labels)
    scores = np.asarray(scores, dtype=np.float64)
    npos = int(labels.sum())
    if npos == 0:
        raise DatasetError("average_precision requires at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = 0
    ap = 0.0
    for k, idx in enumerate(order, start=1):
        if labels[idx] == 1:
            hits += 1
            ap += hits / k
    return float(ap / npos)


def evaluate(labels, probs, threshold: float = 0.5) -> EvalResult:
    """All six benchmark metrics in one result."""
    res = confusion_metrics(labels, probs, threshold)
    res.auc = roc_auc(labels, probs)
    res.ap = average_precision(labels, probs)
    return res

"""Detection metrics and uncertainty-ranking metrics.

Classification metrics operate on an ``EvalFrame``; the binary view treats
every non-benign label as "attack". Ranking metrics take per-sample
uncertainty scores (higher = less certain) and 0/1 labels (1 = the event the
score should flag, such as an error or an unknown-class sample).
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


class MetricUndefined(ValueError):
    """The metric's denominator is empty for this frame."""


class FewNegativesWarning(UserWarning):
    pass


@dataclass
class EvalFrame:
    y_true: np.ndarray
    y_pred: np.ndarray
    benign_label: int
    certainty: np.ndarray | None = None

    def __post_init__(self):
        self.y_true = np.asarray(self.y_true)
        self.y_pred = np.asarray(self.y_pred)
        if self.y_true.shape != self.y_pred.shape:
            raise ValueError("y_true and y_pred differ in length")
        if self.certainty is not None:
            self.certainty = np.asarray(self.certainty, dtype=np.float64)
            if self.certainty.shape != self.y_true.shape:
                raise ValueError("certainty length differs from labels")

    @property
    def t(self) -> np.ndarray:
        return self.y_true != self.benign_label

    @property
    def p(self) -> np.ndarray:
        return self.y_pred != self.benign_label


def multiclass_accuracy(f: EvalFrame) -> float:
    return float(np.mean(f.y_true == f.y_pred))


def binary_accuracy(f: EvalFrame) -> float:
    return float(np.mean(f.t == f.p))


def misclassified_positive_rate(f: EvalFrame) -> float:
    """Attacks flagged as attacks but given the wrong attack type, over all attacks."""
    n_attack = int(f.t.sum())
    if n_attack == 0:
        raise MetricUndefined("no attack samples")
    wrong_type = f.t & f.p & (f.y_pred != f.y_true)
    return wrong_type.sum() / n_attack


def false_omission_rate(f: EvalFrame) -> float:
    """Attacks predicted benign, over all predicted-benign samples."""
    n_neg = int((~f.p).sum())
    if n_neg == 0:
        raise MetricUndefined("nothing predicted benign")
    return (f.t & ~f.p).sum() / n_neg


def f1_binary(f: EvalFrame) -> float:
    tp = int((f.t & f.p).sum())
    fp = int((~f.t & f.p).sum())
    fn = int((f.t & ~f.p).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def competence(f: EvalFrame) -> float:
    """Certainty mass of true positives minus false positives, per predicted positive."""
    if f.certainty is None:
        raise ValueError("competence needs per-sample certainty")
    tp = f.t & f.p
    fp = ~f.t & f.p
    n = int(tp.sum() + fp.sum())
    if n == 0:
        raise MetricUndefined("no predicted positives")
    return float((f.certainty[tp].sum() - f.certainty[fp].sum()) / n)


CLASSIFICATION_METRICS = {
    "multiclass_accuracy": multiclass_accuracy,
    "binary_accuracy": binary_accuracy,
    "misclassified_positive_rate": misclassified_positive_rate,
    "false_omission_rate": false_omission_rate,
    "f1_binary": f1_binary,
    "competence": competence,
}


def classification_report(f: EvalFrame) -> dict:
    """All six metrics; undefined ones are reported as None."""
    out = {}
    for name, fn in CLASSIFICATION_METRICS.items():
        if name == "competence" and f.certainty is None:
            out[name] = None
            continue
        try:
            out[name] = float(fn(f))
        except MetricUndefined:
            out[name] = None
    return out


def error_counts(f: EvalFrame) -> dict:
    """Multiclass errors split into binary errors and flagged-but-wrong-type errors."""
    return {
        "multiclass_errors": int((f.y_true != f.y_pred).sum()),
        "binary_errors": int((f.t != f.p).sum()),
        "wrong_type_errors": int((f.t & f.p & (f.y_true != f.y_pred)).sum()),
    }


# ---------------------------------------------------------------------------
# ranking metrics


def _binary_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if y.all() or not y.any():
        raise ValueError("labels hold a single class")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate with ties counted as one half."""
    s, y = _binary_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    # average ranks are multiples of 1/2, so doubling keeps everything integral
    r2 = (2 * rankdata(s, method="average")).astype(np.int64)
    u2 = int(r2[y].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def tp_at_tn(scores, labels, tn_target: float = 0.95) -> float:
    """Fraction of positives at or above the lowest threshold rejecting ``tn_target`` of negatives.

    A negative counts as rejected when its score is strictly below the
    threshold. Candidate thresholds are the observed scores; when none reaches
    the target the threshold is +inf and the result is 0.
    """
    s, y = _binary_labels(scores, labels)
    neg = np.sort(s[~y])
    if len(neg) < 20:
        warnings.warn(f"only {len(neg)} negatives; the {tn_target:.2f} quantile is coarse", FewNegativesWarning, stacklevel=2)
    need = tn_target * len(neg) - 1e-12
    cand = np.unique(s)
    ok = np.flatnonzero(np.searchsorted(neg, cand, side="left") >= need)
    tau = cand[ok[0]] if len(ok) else np.inf
    return float(np.mean(s[y] >= tau))


def roc_curve(scores, labels) -> list[tuple[float, float, float]]:
    """(threshold, fpr, tpr) with "flagged" meaning score >= threshold, from +inf down."""
    s, y = _binary_labels(scores, labels)
    n_pos = y.sum()
    n_neg = len(y) - n_pos
    pts = [(float("inf"), 0.0, 0.0)]
    for thr in np.unique(s)[::-1]:
        hit = s >= thr
        pts.append((float(thr), (hit & ~y).sum() / n_neg, (hit & y).sum() / n_pos))
    return pts


def uq_report(scores, labels, tn_target: float = 0.95) -> dict:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", FewNegativesWarning)
        tp = tp_at_tn(scores, labels, tn_target)
    out = {"auroc": auroc(scores, labels), "tp_at_tn": tp}
    if any(issubclass(w.category, FewNegativesWarning) for w in caught):
        out["tp_at_tn_warning"] = "fewer than 20 negatives"
    return out


# ---------------------------------------------------------------------------
# report files


def write_json(report: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


def write_roc_csv(points, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for thr, fpr, tpr in points:
            w.writerow([repr(float(thr)), repr(float(fpr)), repr(float(tpr))])
    return path

"""Open-set evaluation metrics: ACC, AUROC, OSCR, macro-F1.

Conventions (the literature leaves all three unstated):
  * AUROC ties get half credit (Mann-Whitney).
  * OSCR uses strict `score > threshold` at every observed score value,
    with the curve extended to FPR=0 and FPR=1 before the trapezoidal
    integration.
  * macro-F1 scores a class with an empty precision+recall denominator
    as 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

UNKNOWN = -1


@dataclass
class ScoredSample:
    score: float
    true_label: int  # known-class index, or UNKNOWN
    predicted_known_label: int  # argmax class, threshold ignored


@dataclass
class MetricReport:
    acc: float
    auroc: float
    oscr: float
    macro_f1: float
    roc_curve: list = field(default_factory=list)  # (FPR, TPR) points
    ccr_fpr_curve: list = field(default_factory=list)  # (FPR, CCR) points

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "auroc": self.auroc,
            "oscr": self.oscr,
            "macro_f1": self.macro_f1,
            "roc_curve": [[float(a), float(b)] for a, b in self.roc_curve],
            "ccr_fpr_curve": [[float(a), float(b)] for a, b in self.ccr_fpr_curve],
        }


def acc(samples: list[ScoredSample]) -> float:
    """Top-1 accuracy over known-class samples (threshold-free)."""
    if not samples:
        raise DataError("acc of empty sample list")
    if any(s.true_label == UNKNOWN for s in samples):
        raise DataError("acc expects known-class samples only")
    hits = sum(1 for s in samples if s.predicted_known_label == s.true_label)
    return hits / len(samples)


def auroc(known_scores, unknown_scores) -> tuple[float, list]:
    """Probability a random known sample outscores a random unknown one
    (ties half); returns (area, ROC curve as (FPR, TPR) points)."""
    kn = np.asarray(known_scores, dtype=np.float64)
    un = np.asarray(unknown_scores, dtype=np.float64)
    if kn.size == 0 or un.size == 0:
        raise DataError("auroc needs non-empty known and unknown scores")
    # rank-based Mann-Whitney; average ranks handle ties
    alls = np.concatenate([kn, un])
    order = np.argsort(alls, kind="mergesort")
    ranks = np.empty_like(alls)
    ranks[order] = np.arange(1, alls.size + 1, dtype=np.float64)
    sorted_vals = alls[order]
    i = 0
    while i < alls.size:
        j = i
        while j + 1 < alls.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    r_known = ranks[: kn.size].sum()
    area = (r_known - kn.size * (kn.size + 1) / 2.0) / (kn.size * un.size)

    thresholds = np.unique(alls)[::-1]
    curve = [(0.0, 0.0)]
    for th in thresholds:
        tpr = float(np.mean(kn > th))
        fpr = float(np.mean(un > th))
        curve.append((fpr, tpr))
    curve.append((1.0, 1.0))
    return float(area), curve


def oscr(known_samples: list[ScoredSample], unknown_scores) -> tuple[float, list]:
    """Area of the correct-classification rate over the false-positive rate.

    CCR(t) counts known samples that are both correctly classified and
    score strictly above t; FPR(t) counts unknown samples above t.
    """
    if not known_samples or len(unknown_scores) == 0:
        raise DataError("oscr needs non-empty known samples and unknown scores")
    k_scores = np.asarray([s.score for s in known_samples], dtype=np.float64)
    correct = np.asarray(
        [s.predicted_known_label == s.true_label for s in known_samples], dtype=bool
    )
    un = np.asarray(unknown_scores, dtype=np.float64)

    thresholds = np.unique(np.concatenate([k_scores, un]))[::-1]
    points = [(0.0, 0.0)]
    for th in thresholds:
        ccr = float(np.mean((k_scores > th) & correct))
        fpr = float(np.mean(un > th))
        points.append((fpr, ccr))
    # extend to FPR=1 with the threshold-free accuracy
    points.append((1.0, float(np.mean(correct))))

    pts = sorted(points)
    area = 0.0
    for (f0, c0), (f1, c1) in zip(pts, pts[1:]):
        area += (f1 - f0) * (c0 + c1) / 2.0
    return float(area), pts


def macro_f1(true_labels, pred_labels, num_known: int) -> float:
    """Macro F1 over the K known classes plus one aggregate unknown class.

    Labels use UNKNOWN (-1) for the extra class; a class with zero
    precision+recall denominator contributes F1 = 0.
    """
    true_labels = list(true_labels)
    pred_labels = list(pred_labels)
    if not true_labels:
        raise DataError("macro_f1 of empty input")
    if len(true_labels) != len(pred_labels):
        raise DataError("macro_f1 label lists differ in length")
    classes = list(range(num_known)) + [UNKNOWN]
    f1s = []
    for c in classes:
        tp = sum(1 for t, p in zip(true_labels, pred_labels) if t == c and p == c)
        fp = sum(1 for t, p in zip(true_labels, pred_labels) if t != c and p == c)
        fn = sum(1 for t, p in zip(true_labels, pred_labels) if t == c and p != c)
        denom = 2 * tp + fp + fn
        f1s.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(f1s))


def full_report(
    known_samples: list[ScoredSample],
    unknown_samples: list[ScoredSample],
    theta: float,
    num_known: int,
) -> MetricReport:
    """Assemble the four metrics from scored test samples.

    Unknown samples carry true_label=UNKNOWN but still record their argmax
    known class, which becomes their (wrong) prediction when they score
    above the threshold.
    """
    unknown_scores = [s.score for s in unknown_samples]
    a = acc(known_samples)
    area, roc = auroc([s.score for s in known_samples], unknown_scores)
    os_area, curve = oscr(known_samples, unknown_scores)

    everything = known_samples + unknown_samples
    true = [s.true_label for s in everything]
    pred = [s.predicted_known_label if s.score > theta else UNKNOWN for s in everything]
    f1 = macro_f1(true, pred, num_known)
    return MetricReport(
        acc=a, auroc=area, oscr=os_area, macro_f1=f1, roc_curve=roc, ccr_fpr_curve=curve
    )

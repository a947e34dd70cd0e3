"""Evaluation battery: binary scores, multi-label ranking, box grounding,
and token grounding.

AUC is the Mann-Whitney statistic computed from average ranks (ties count
half). EER interpolates linearly between the two adjacent ROC points where
the false-positive and false-negative rates cross. Average precision sums
precision at each positive's rank (ties broken by input order, stable).
"""

from __future__ import annotations

import dataclasses
import json
import logging

import numpy as np

from .errors import DegenerateInputError

log = logging.getLogger(__name__)


def _check_binary_scores(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DegenerateInputError("scores and labels must be equal-length vectors")
    if not np.all((labels == 0) | (labels == 1)):
        raise DegenerateInputError("labels must be 0/1")
    if labels.min() == labels.max():
        raise DegenerateInputError("both classes required")
    return scores, labels.astype(bool)


def _average_ranks(values):
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j < len(values) and sorted_vals[j] == sorted_vals[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j + 1)  # mean of 1-based ranks i+1..j
        i = j
    return ranks


def roc_auc(scores, labels):
    scores, labels = _check_binary_scores(scores, labels)
    ranks = _average_ranks(scores)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    return (ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _roc_points(scores, labels):
    """ROC sweep over descending distinct thresholds, from (0,0) to (1,1)."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    pos = labels[order].astype(int)
    n_pos = pos.sum()
    n_neg = len(pos) - n_pos
    tps = np.cumsum(pos)
    fps = np.cumsum(1 - pos)
    distinct = np.nonzero(np.diff(s))[0]
    idx = np.concatenate([distinct, [len(s) - 1]])
    fpr = np.concatenate([[0.0], fps[idx] / n_neg])
    tpr = np.concatenate([[0.0], tps[idx] / n_pos])
    return fpr, 1.0 - tpr


def eer(scores, labels):
    """Operating point where FPR equals FNR, linearly interpolated."""
    scores, labels = _check_binary_scores(scores, labels)
    fpr, fnr = _roc_points(scores, labels)
    diff = fpr - fnr
    for i in range(len(diff) - 1):
        if diff[i] <= 0.0 <= diff[i + 1] or diff[i] >= 0.0 >= diff[i + 1]:
            if diff[i] == diff[i + 1]:
                return float(fpr[i])
            t = diff[i] / (diff[i] - diff[i + 1])
            return float(fpr[i] + t * (fpr[i + 1] - fpr[i]))
    # diff is monotone from -1 to +1 so a crossing always exists
    raise AssertionError("no FPR/FNR crossing found")


def binary_accuracy(scores, labels, threshold=0.5):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    return float(((scores > threshold).astype(int) == labels).mean())


def average_precision(scores, labels):
    """Precision summed at each positive's rank, divided by positive count."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DegenerateInputError("average_precision needs >=1 positive")
    order = np.argsort(-scores, kind="mergesort")
    hits = labels[order]
    ranks = np.arange(1, len(hits) + 1)
    precision_at = np.cumsum(hits) / ranks
    return float(precision_at[hits].sum() / n_pos)


def multilabel_metrics(probs, labels, threshold=0.5):
    """(mAP, CF1, OF1) over the class columns of ``probs``/``labels``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape or probs.ndim != 2:
        raise DegenerateInputError("probs and labels must be (n, classes)")
    aps = []
    for c in range(probs.shape[1]):
        if labels[:, c].sum() == 0:
            log.warning("multilabel_metrics: class %d has no positives, skipped", c)
            continue
        aps.append(average_precision(probs[:, c], labels[:, c]))
    if not aps:
        raise DegenerateInputError("no class has positives")
    mean_ap = float(np.mean(aps))

    pred = probs > threshold
    actual = labels == 1
    f1s = []
    for c in range(probs.shape[1]):
        f1s.append(_f1(int((pred[:, c] & actual[:, c]).sum()),
                       int(pred[:, c].sum()), int(actual[:, c].sum())))
    cf1 = float(np.mean(f1s))
    of1 = _f1(int((pred & actual).sum()), int(pred.sum()), int(actual.sum()))
    return mean_ap, cf1, of1


def _f1(tp, n_pred, n_actual):
    if n_pred == 0 or n_actual == 0 or tp == 0:
        return 0.0
    p = tp / n_pred
    r = tp / n_actual
    return 2 * p * r / (p + r)


def iou(box_a, box_b):
    """Intersection over union of two (x0, y0, x1, y1) boxes."""
    for box in (box_a, box_b):
        x0, y0, x1, y1 = box
        if not (x1 > x0 and y1 > y0):
            raise DegenerateInputError(f"inverted or empty box {tuple(box)}")
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def grounding_image(pred_boxes, gt_boxes):
    """(IoUmean, IoU50, IoU75) over paired predicted/ground-truth boxes."""
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    if len(pred_boxes) != len(gt_boxes) or len(pred_boxes) == 0:
        raise DegenerateInputError("need >=1 paired boxes")
    ious = np.array([iou(p, g) for p, g in zip(pred_boxes, gt_boxes)])
    return (float(ious.mean()), float((ious >= 0.5).mean()),
            float((ious >= 0.75).mean()))


def token_prf(token_preds, y_tok):
    """Micro precision/recall/F1 on the forged-token class, pooled."""
    preds = np.asarray(token_preds).astype(bool).ravel()
    actual = np.asarray(y_tok).astype(bool).ravel()
    if preds.shape != actual.shape:
        raise DegenerateInputError("prediction/label shape mismatch")
    tp = int((preds & actual).sum())
    if preds.sum() == 0:
        log.warning("token_prf: no predicted positives, precision set to 0")
        precision = 0.0
    else:
        precision = tp / int(preds.sum())
    recall = tp / int(actual.sum()) if actual.sum() else 0.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return float(precision), float(recall), float(f1)


@dataclasses.dataclass
class MetricsReport:
    auc: float
    eer: float
    acc: float
    map: float
    cf1: float
    of1: float
    iou_mean: float
    iou50: float
    iou75: float
    precision: float
    recall: float
    f1: float

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def to_json(self):
        return json.dumps(self.to_dict(), separators=(",", ":"))

    def render_table(self):
        groups = [
            ("binary", [("ACC", self.acc), ("AUC", self.auc), ("EER", self.eer)]),
            ("multi-label", [("mAP", self.map), ("CF1", self.cf1),
                             ("OF1", self.of1)]),
            ("image grounding", [("IoUmean", self.iou_mean),
                                 ("IoU50", self.iou50), ("IoU75", self.iou75)]),
            ("text grounding", [("Precision", self.precision),
                                ("Recall", self.recall), ("F1", self.f1)]),
        ]
        lines = []
        for title, cells in groups:
            row = "  ".join(f"{k} {v:7.4f}" for k, v in cells)
            lines.append(f"{title:<18} {row}")
        return "\n".join(lines)

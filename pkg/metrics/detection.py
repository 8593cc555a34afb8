"""
Detection and segmentation metrics: AUROC, AP, F1-max, IoU
Ranking metrics follow scikit-learn: AUROC counts ties as 1/2, AP is the step-wise
precision-recall sum over distinct thresholds.
"""
import numpy as np
from sklearn.metrics import average_precision_score, precision_recall_curve, roc_auc_score

from recovery.errors import UndefinedMetricError, ValidationError


def _check_scored(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValidationError(f"scores ({scores.size}) and labels ({labels.size}) differ in length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("labels must be 0 or 1")
    if not np.all(np.isfinite(scores)):
        raise ValidationError("scores must be finite")
    if labels.min(initial=1) == labels.max(initial=0):
        raise UndefinedMetricError("ranking metrics need both classes in the labels")
    return scores, labels.astype(np.int64)


def auroc(scores, labels) -> float:
    scores, labels = _check_scored(scores, labels)
    return float(roc_auc_score(labels, scores))


def ap(scores, labels) -> float:
    scores, labels = _check_scored(scores, labels)
    return float(average_precision_score(labels, scores))


def f1max(scores, labels) -> float:
    """Largest F1 over every score threshold"""
    scores, labels = _check_scored(scores, labels)
    precision, recall, _ = precision_recall_curve(labels, scores)
    denominator = precision + recall
    f1 = np.divide(2 * precision * recall, denominator, out=np.zeros_like(denominator), where=denominator > 0)
    return float(f1.max())


def iou(pred_mask, gt_mask) -> float:
    """Intersection over union of two binary masks; two empty masks score 1"""
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValidationError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)

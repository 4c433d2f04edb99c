"""Confusion matrices and segmentation / classification scores."""

import warnings

import numpy as np

from kpconvx.errors import ContractError
from kpconvx.models.schemas import EvaluationMetrics


def confusion_matrix(predictions: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Counts with ground truth along rows and predictions along columns."""
    predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if predictions.shape != labels.shape:
        raise ContractError(f"{predictions.size} predictions for {labels.size} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"Labels must lie in [0, {num_classes})")
    return np.bincount(labels * num_classes + predictions, minlength=num_classes**2).reshape(num_classes, num_classes)


def metrics_from_confusion(cm: np.ndarray) -> EvaluationMetrics:
    """Overall accuracy, class-mean accuracy and class-mean IoU; absent classes are ignored."""
    cm = np.asarray(cm, dtype=np.float64)
    true_positives = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        class_accuracy = np.where(support > 0, true_positives / support, np.nan)
        union = support + predicted - true_positives
        iou = np.where(union > 0, true_positives / union, np.nan)
        total = cm.sum()
        return EvaluationMetrics(
            accuracy=float(true_positives.sum() / total) if total else 0.0,
            macc=float(np.nanmean(class_accuracy)) if np.any(support > 0) else 0.0,
            miou=float(np.nanmean(iou)) if np.any(union > 0) else 0.0,
            per_class_iou=[float(v) for v in iou],
        )

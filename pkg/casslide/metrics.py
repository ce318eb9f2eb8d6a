"""
Slide-level evaluation: confusion matrices, accuracy, Cohen's kappa and
ROC analysis for the binary benign versus cancer task.
"""

import json
import logging

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from scipy.integrate import trapezoid

from .constants import CLASS_NAMES
from .utils import ContractError, ShapeError, autodoc

xp = np

logger = logging.getLogger(__name__)

__all__ = [
    "accuracy",
    "cohens_kappa",
    "confusion_matrix",
    "evaluation_report",
    "plot_roc",
    "roc_auc",
    "roc_curve",
    "specificity_at_full_sensitivity",
    "trapezoid_auc",
    "write_report",
]


def _check_matrix(cm):
    cm = xp.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ShapeError("A confusion matrix must be square", cm.shape)
    if xp.any(cm < 0):
        raise ContractError("Confusion matrix counts must be non-negative")
    if cm.sum() == 0:
        raise ContractError("Cannot score an empty confusion matrix")
    return cm.astype(xp.float64)


def confusion_matrix(true, predicted, n_classes):
    """
    Counts of (true, predicted) class index pairs.

    Parameters
    ----------
    true, predicted: array_like
        Class indices in :code:`[0, n_classes)`
    n_classes: int

    Returns
    -------
    array_like
        :code:`(n_classes, n_classes)` integer counts, rows are true classes
    """
    true = xp.asarray(true, dtype=int).reshape(-1)
    predicted = xp.asarray(predicted, dtype=int).reshape(-1)
    if true.shape != predicted.shape:
        raise ShapeError("One prediction is needed per slide", true.shape, predicted.shape)
    for values in (true, predicted):
        if values.size and (values.min() < 0 or values.max() >= n_classes):
            raise ContractError(f"Class indices must lie in [0, {n_classes})")
    cm = xp.zeros((n_classes, n_classes), dtype=xp.int64)
    xp.add.at(cm, (true, predicted), 1)
    return cm


@autodoc
def accuracy(cm):
    """
    Fraction of slides on the diagonal.

    Parameters
    ----------
    {cm}

    Returns
    -------
    float
    """
    cm = _check_matrix(cm)
    return float(xp.trace(cm) / cm.sum())


@autodoc
def cohens_kappa(cm):
    """
    Agreement corrected for chance, :code:`(p_o - p_e) / (1 - p_e)`.

    :code:`p_e` comes from the row and column marginals. When chance
    agreement is certain (:code:`p_e = 1`) the kappa is 0.

    Parameters
    ----------
    {cm}

    Returns
    -------
    float
    """
    cm = _check_matrix(cm)
    total = cm.sum()
    observed = xp.trace(cm) / total
    expected = float(cm.sum(axis=1) @ cm.sum(axis=0)) / total**2
    if expected == 1:
        return 0.0
    return float((observed - expected) / (1 - expected))


def _check_binary(scores, labels):
    scores = xp.asarray(scores, dtype=xp.float64).reshape(-1)
    labels = xp.asarray(labels, dtype=int).reshape(-1)
    if scores.shape != labels.shape:
        raise ShapeError("One score is needed per label", scores.shape, labels.shape)
    if not xp.all(xp.isin(labels, (0, 1))):
        raise ContractError("ROC labels must be 0 or 1")
    if labels.min() == labels.max():
        raise ContractError("ROC analysis needs both classes")
    return scores, labels


@autodoc
def roc_curve(scores, labels):
    """
    False and true positive rates at every distinct score threshold.

    The curve starts at :code:`(0, 0)` and ends at :code:`(1, 1)`; a slide
    is positive at threshold :code:`t` when its score is at least
    :code:`t`.

    Parameters
    ----------
    {scores}
    {labels}

    Returns
    -------
    fpr, tpr, thresholds: array_like
    """
    scores, labels = _check_binary(scores, labels)
    thresholds = xp.unique(scores)[::-1]
    positives = scores[labels == 1]
    negatives = scores[labels == 0]
    tpr = xp.array([xp.mean(positives >= threshold) for threshold in thresholds])
    fpr = xp.array([xp.mean(negatives >= threshold) for threshold in thresholds])
    return (
        xp.concatenate([[0.0], fpr]),
        xp.concatenate([[0.0], tpr]),
        xp.concatenate([[xp.inf], thresholds]),
    )


@autodoc
def roc_auc(scores, labels):
    """
    The ROC curve and its area as the Mann-Whitney statistic.

    The area is the probability that a random positive scores above a
    random negative, ties count one half.

    Parameters
    ----------
    {scores}
    {labels}

    Returns
    -------
    curve: tuple
        :func:`roc_curve` output
    auc: float
    """
    scores, labels = _check_binary(scores, labels)
    positives = scores[labels == 1]
    negatives = scores[labels == 0]
    greater = (positives[:, None] > negatives[None, :]).sum()
    ties = (positives[:, None] == negatives[None, :]).sum()
    auc = (greater + 0.5 * ties) / (len(positives) * len(negatives))
    return roc_curve(scores, labels), float(auc)


def trapezoid_auc(fpr, tpr):
    """
    Area under a piecewise linear ROC curve.
    """
    return float(trapezoid(tpr, fpr))


@autodoc
def specificity_at_full_sensitivity(scores, labels):
    """
    Fraction of negatives scoring strictly below the lowest positive.

    This is the share of benign slides that can be set aside without
    missing any cancer.

    Parameters
    ----------
    {scores}
    {labels}

    Returns
    -------
    float
    """
    scores, labels = _check_binary(scores, labels)
    return float(xp.mean(scores[labels == 0] < scores[labels == 1].min()))


def evaluation_report(cm, scores=None, labels=None, class_names=None):
    """
    A JSON serializable summary of one evaluation.

    Parameters
    ----------
    cm: array_like
        The confusion matrix
    scores, labels: array_like, optional
        Cancer probabilities and binary labels, adds the ROC entries
    class_names: tuple, optional
        Row and column names of the matrix

    Returns
    -------
    dict
    """
    cm = xp.asarray(cm, dtype=xp.int64)
    if class_names is None:
        class_names = CLASS_NAMES if len(cm) == len(CLASS_NAMES) else ("benign", "cancer")
    report = dict(
        class_names=list(class_names),
        confusion_matrix=cm.tolist(),
        n_slides=int(cm.sum()),
        accuracy=accuracy(cm),
        kappa=cohens_kappa(cm),
    )
    if scores is not None:
        (fpr, tpr, _), auc = roc_auc(scores, labels)
        report.update(
            auc=auc,
            specificity_at_full_sensitivity=specificity_at_full_sensitivity(scores, labels),
            roc=[[float(x), float(y)] for x, y in zip(fpr, tpr)],
        )
    logger.info("Accuracy %.4f kappa %.4f", report["accuracy"], report["kappa"])
    return report


def write_report(report, path):
    with open(path, "w") as ff:
        json.dump(report, ff, indent=2)


def plot_roc(fpr, tpr, path, size=400, auc=None):
    """
    Plot a ROC curve with the chance diagonal and write it as PNG.

    Parameters
    ----------
    fpr, tpr: array_like
        The curve from :func:`roc_curve`
    path: str
        Output PNG path
    size: int
        Image width and height in pixels
    auc: float, optional
        Shown in the legend when given

    Returns
    -------
    matplotlib.figure.Figure
    """
    dpi = 100
    figure = Figure(figsize=(size / dpi, size / dpi), dpi=dpi)
    FigureCanvasAgg(figure)
    axes = figure.add_subplot()
    axes.plot([0, 1], [0, 1], color="gray", linestyle="--", linewidth=1)
    label = "ROC" if auc is None else f"ROC (AUC = {auc:.3f})"
    axes.plot(fpr, tpr, color="red", linewidth=2, label=label)
    axes.set_xlim(0, 1)
    axes.set_ylim(0, 1)
    axes.set_xlabel("1 - specificity")
    axes.set_ylabel("Sensitivity")
    axes.legend(loc="lower right")
    figure.tight_layout()
    figure.savefig(path, dpi=dpi)
    return figure

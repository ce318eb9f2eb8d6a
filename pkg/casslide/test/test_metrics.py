import json

import numpy as np
import pytest
from PIL import Image

from ..metrics import (
    accuracy,
    cohens_kappa,
    confusion_matrix,
    evaluation_report,
    plot_roc,
    roc_auc,
    roc_curve,
    specificity_at_full_sensitivity,
    trapezoid_auc,
    write_report,
)
from ..utils import ContractError, ShapeError

REFERENCE_MATRIX = np.array([[29, 2, 0], [4, 12, 4], [0, 2, 11]])


def _random_labels(seed, n=80, n_classes=3):
    generator = np.random.default_rng(seed)
    true = generator.integers(n_classes, size=n)
    predicted = np.where(generator.uniform(size=n) < 0.6, true, generator.integers(n_classes, size=n))
    return true, predicted


def _random_scores(seed, n=60):
    generator = np.random.default_rng(seed)
    labels = generator.integers(2, size=n)
    labels[:2] = [0, 1]
    scores = np.round(generator.uniform(size=n) + 0.5 * labels, 1)
    return scores, labels


@pytest.mark.parametrize("seed", range(3))
def test_confusion_matrix_matches_sklearn(seed):
    metrics = pytest.importorskip("sklearn.metrics")
    true, predicted = _random_labels(seed)
    ours = confusion_matrix(true, predicted, 3)
    assert np.array_equal(ours, metrics.confusion_matrix(true, predicted, labels=[0, 1, 2]))


@pytest.mark.parametrize("seed", range(3))
def test_kappa_matches_sklearn(seed):
    metrics = pytest.importorskip("sklearn.metrics")
    true, predicted = _random_labels(seed)
    ours = cohens_kappa(confusion_matrix(true, predicted, 3))
    assert abs(ours - metrics.cohen_kappa_score(true, predicted)) < 1e-12


def test_reference_matrix():
    assert accuracy(REFERENCE_MATRIX) == 0.8125
    expected = 1538 / 4096
    assert cohens_kappa(REFERENCE_MATRIX) == pytest.approx((0.8125 - expected) / (1 - expected))


def test_kappa_of_certain_chance_agreement_is_zero():
    assert cohens_kappa([[5, 0], [0, 0]]) == 0


def test_perfect_agreement():
    cm = np.diag([3, 4, 5])
    assert accuracy(cm) == 1
    assert cohens_kappa(cm) == 1


def test_confusion_matrix_checks_inputs():
    with pytest.raises(ShapeError):
        confusion_matrix([0, 1], [0], 2)
    with pytest.raises(ContractError):
        confusion_matrix([0, 3], [0, 1], 3)


@pytest.mark.parametrize("cm", [np.zeros((3, 3)), [[1, -1], [0, 2]]])
def test_invalid_matrix_raises(cm):
    with pytest.raises(ContractError):
        accuracy(cm)


def test_non_square_matrix_raises():
    with pytest.raises(ShapeError):
        cohens_kappa(np.ones((2, 3)))


@pytest.mark.parametrize("seed", range(3))
def test_auc_matches_sklearn(seed):
    metrics = pytest.importorskip("sklearn.metrics")
    scores, labels = _random_scores(seed)
    (fpr, tpr, _), auc = roc_auc(scores, labels)
    reference = metrics.roc_auc_score(labels, scores)
    assert abs(auc - reference) < 1e-12
    assert abs(trapezoid_auc(fpr, tpr) - reference) < 1e-12


def test_roc_curve_end_points():
    fpr, tpr, thresholds = roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    assert (fpr[0], tpr[0]) == (0, 0)
    assert (fpr[-1], tpr[-1]) == (1, 1)
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
    assert thresholds[0] == np.inf


@pytest.mark.parametrize("seed", range(100))
def test_rank_auc_matches_trapezoid_area(seed):
    scores, labels = _random_scores(seed, n=int(np.random.default_rng(seed).integers(4, 40)))
    (fpr, tpr, _), auc = roc_auc(scores, labels)
    assert abs(auc - trapezoid_auc(fpr, tpr)) < 1e-9


def test_auc_with_one_swapped_pair():
    (fpr, tpr, _), auc = roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    assert auc == 0.75
    assert trapezoid_auc(fpr, tpr) == pytest.approx(0.75)


def test_separable_scores():
    _, auc = roc_auc([0.1, 0.2, 0.7, 0.9], [0, 0, 1, 1])
    assert auc == 1


def test_specificity_at_full_sensitivity():
    scores = [0.1, 0.2, 0.5, 0.6, 0.4, 0.9]
    labels = [0, 0, 0, 0, 1, 1]
    assert specificity_at_full_sensitivity(scores, labels) == 0.5


def test_roc_needs_both_classes():
    with pytest.raises(ContractError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ContractError):
        roc_curve([0.1, 0.2], [0, 2])


def test_evaluation_report(tmp_path):
    report = evaluation_report(REFERENCE_MATRIX)
    assert report["class_names"] == ["benign", "dcis", "idc"]
    assert report["n_slides"] == 64
    assert report["accuracy"] == 0.8125
    assert "auc" not in report
    binary = evaluation_report([[3, 1], [0, 4]], scores=[0.1, 0.2, 0.3, 0.6, 0.7, 0.8, 0.9, 0.4],
                               labels=[0, 0, 0, 0, 1, 1, 1, 1])
    assert binary["class_names"] == ["benign", "cancer"]
    assert binary["auc"] == pytest.approx(15 / 16)
    assert binary["roc"][0] == [0, 0] and binary["roc"][-1] == [1, 1]
    path = tmp_path / "report.json"
    write_report(binary, str(path))
    with open(path) as ff:
        assert json.load(ff) == binary


def test_plot_roc(tmp_path):
    path = str(tmp_path / "roc.png")
    plot_roc([0, 0.2, 1], [0, 0.8, 1], path, size=300, auc=0.8)
    image = np.asarray(Image.open(path).convert("RGB")).astype(int)
    assert image.shape == (300, 300, 3)
    red = (image[..., 0] > 200) & (image[..., 1] < 80) & (image[..., 2] < 80)
    assert red.sum() > 100

import numpy as np
import pytest

from ..forest import (
    DecisionTree,
    ForestConfig,
    ForestModel,
    cross_validate,
    fit_tree,
    load_forest,
    oob_score,
    predict,
    predict_proba,
    save_forest,
    split_counts,
    task_labels,
    train_forest,
)
from ..utils import ContractError, ShapeError, rng


def _blobs(n_per_class=30, n_features=6, n_classes=3, seed=0, informative=None):
    generator = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    features = generator.standard_normal((len(labels), n_features))
    columns = range(n_features) if informative is None else informative
    for column in columns:
        features[:, column] += 4 * labels
    return features, labels


def test_task_labels():
    labels = np.array([0, 1, 2, 2, 0])
    assert task_labels(labels, "3class").tolist() == [0, 1, 2, 2, 0]
    assert task_labels(labels, "binary").tolist() == [0, 1, 1, 1, 0]
    with pytest.raises(ValueError):
        task_labels(labels, "4class")


@pytest.mark.parametrize("scale,n_features,expected", [(1, 49, 7), (0.5, 49, 4), (1, 1, 1), (2, 4, 4)])
def test_max_features(scale, n_features, expected):
    assert ForestConfig(max_features_scale=scale).max_features(n_features) == expected


@pytest.mark.parametrize(
    "kwargs", [dict(n_trees=0), dict(min_samples_leaf=0), dict(max_features_scale=0)]
)
def test_invalid_config_raises(kwargs):
    with pytest.raises(ValueError):
        ForestConfig(**kwargs)


def test_leaf_frequencies():
    tree = DecisionTree(
        feature=[0, -1, -1],
        threshold=[0.5, 0, 0],
        left=[1, -1, -1],
        right=[2, -1, -1],
        value=[[4, 1, 0], [3, 1, 0], [1, 0, 0]],
    )
    probabilities = tree.predict_proba(np.array([[0.2], [0.5], [0.7]]))
    assert probabilities.tolist() == [[0.75, 0.25, 0], [0.75, 0.25, 0], [1, 0, 0]]
    assert tree.leaves.tolist() == [1, 2]


def test_tree_fits_training_data():
    features, labels = _blobs(n_per_class=10, seed=1)
    tree = fit_tree(features, labels, 3, rng(0, "test"), max_features=2)
    assert np.all(np.argmax(tree.predict_proba(features), axis=1) == labels)
    assert np.all(tree.value[tree.leaves].astype(bool).sum(axis=1) == 1)


def test_root_split_matches_sklearn():
    tree_module = pytest.importorskip("sklearn.tree")
    generator = np.random.default_rng(3)
    features = generator.standard_normal((60, 5))
    labels = (features[:, 2] + 0.3 * generator.standard_normal(60) > 0.1).astype(int)
    ours = fit_tree(features, labels, 2, rng(0, "test"), max_features=5)
    reference = tree_module.DecisionTreeClassifier(random_state=0).fit(features, labels).tree_
    assert ours.feature[0] == reference.feature[0]
    assert abs(ours.threshold[0] - reference.threshold[0]) < 1e-5


def test_constant_feature_falls_back_to_the_others():
    generator = np.random.default_rng(0)
    features = np.zeros((20, 3))
    features[:, 2] = generator.standard_normal(20)
    labels = (features[:, 2] > 0).astype(int)
    tree = fit_tree(features, labels, 2, rng(0, "test"), max_features=1)
    assert tree.feature[0] == 2


def test_min_samples_leaf():
    features, labels = _blobs(n_per_class=10, seed=2)
    tree = fit_tree(features, labels, 3, rng(0, "test"), max_features=3, min_samples_leaf=4)
    assert np.all(tree.value[tree.leaves].sum(axis=1) >= 4)


@pytest.fixture
def small_config():
    return ForestConfig(n_trees=25, seed=4)


def test_forest_separates_blobs(small_config):
    features, labels = _blobs(seed=0)
    model = train_forest(features, labels, small_config)
    test_features, test_labels = _blobs(seed=1)
    assert np.mean(predict(model, test_features) == test_labels) > 0.9
    probabilities = predict_proba(model, test_features)
    assert probabilities.shape == (90, 3)
    assert np.allclose(probabilities.sum(axis=1), 1)


def test_forest_matches_sklearn_accuracy(small_config):
    ensemble = pytest.importorskip("sklearn.ensemble")
    features, labels = _blobs(n_features=8, seed=5, informative=[0, 3])
    test_features, test_labels = _blobs(n_features=8, seed=6, informative=[0, 3])
    ours = np.mean(predict(train_forest(features, labels, small_config), test_features) == test_labels)
    reference = ensemble.RandomForestClassifier(n_estimators=25, random_state=0)
    theirs = reference.fit(features, labels).score(test_features, test_labels)
    assert abs(ours - theirs) < 0.1


def test_forest_is_reproducible(small_config):
    features, labels = _blobs(seed=0)
    first = train_forest(features, labels, small_config, threads=1)
    second = train_forest(features, labels, small_config, threads=3)
    assert first.to_dict() == second.to_dict()
    other = train_forest(features, labels, ForestConfig(n_trees=25, seed=5))
    assert first.to_dict() != other.to_dict()


def test_binary_labels_infer_two_classes():
    features, labels = _blobs(n_classes=2)
    model = train_forest(features, labels, ForestConfig(n_trees=5))
    assert model.n_classes == 2


def test_configured_classes_must_cover_labels():
    features, labels = _blobs()
    with pytest.raises(ContractError):
        train_forest(features, labels, ForestConfig(n_trees=2, n_classes=2))


def test_single_class_raises():
    with pytest.raises(ContractError):
        train_forest(np.zeros((4, 2)), np.zeros(4, dtype=int))


def test_non_finite_features_raise():
    features, labels = _blobs()
    features[3, 1] = np.nan
    with pytest.raises(ContractError):
        train_forest(features, labels)


def test_feature_dimension_checked(small_config):
    features, labels = _blobs()
    model = train_forest(features, labels, small_config)
    with pytest.raises(ShapeError):
        predict_proba(model, features[:, :4])


def test_oob_score(small_config):
    features, labels = _blobs(seed=0)
    model = train_forest(features, labels, small_config)
    assert 0.9 < oob_score(model, features, labels) <= 1


def test_oob_score_on_two_gaussians():
    features, labels = _blobs(n_per_class=100, n_features=2, n_classes=2, seed=3)
    model = train_forest(features, labels, ForestConfig(n_trees=50, seed=1))
    assert oob_score(model, features, labels) >= 0.95


def test_split_counts_favour_informative_feature():
    features, labels = _blobs(n_features=5, informative=[3])
    model = train_forest(features, labels, ForestConfig(n_trees=30))
    counts = split_counts(model)
    assert counts.shape == (5,)
    assert np.argmax(counts) == 3


def test_cross_validation():
    features, labels = _blobs(n_per_class=10)
    grid = dict(min_samples_leaf=(1, 3), max_features_scale=(1.0,))
    best, scores = cross_validate(features, labels, ForestConfig(n_trees=5), grid=grid, folds=3)
    assert len(scores) == 2
    assert best.min_samples_leaf in (1, 3)
    assert best.n_trees == 5
    assert all(0 <= score <= 1 for _, score in scores)


def test_cross_validation_needs_enough_rows():
    features, labels = _blobs(n_per_class=1)
    with pytest.raises(ContractError):
        cross_validate(features, labels, folds=5)


def test_forest_on_disk(tmp_path, small_config):
    features, labels = _blobs()
    model = train_forest(features, labels, small_config)
    path = str(tmp_path / "forest.json")
    save_forest(model, path)
    loaded = load_forest(path)
    assert loaded.config == model.config
    assert np.array_equal(predict_proba(loaded, features), predict_proba(model, features))


def test_load_rejects_other_json():
    with pytest.raises(ContractError):
        ForestModel.from_dict(dict(format="other"))

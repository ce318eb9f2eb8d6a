"""
Random forest slide classifiers.

Each tree is grown on a bootstrap sample with Gini impurity splits over
:code:`ceil(sqrt(d))` candidate features per node until its nodes are pure
or too small to split. Class probabilities are the mean over trees of the
normalized leaf class histograms.

Trees are stored as flat node arrays, and models are written as JSON with
thresholds kept as :code:`repr` strings so a reloaded model predicts
bit-identically.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import product

import numpy as np

from .utils import ContractError, ShapeError, autodoc, rng

xp = np

logger = logging.getLogger(__name__)

MODEL_FORMAT = "casslide-forest"

TASKS = ("3class", "binary")

__all__ = [
    "DecisionTree",
    "ForestConfig",
    "ForestModel",
    "TASKS",
    "cross_validate",
    "fit_tree",
    "load_forest",
    "oob_score",
    "predict",
    "predict_proba",
    "save_forest",
    "split_counts",
    "task_labels",
    "train_forest",
]


def task_labels(labels, task):
    """
    Map slide labels (0 benign, 1 DCIS, 2 IDC) to the classes of a task.

    :code:`"3class"` keeps them and :code:`"binary"` gives 0 for benign and
    1 for DCIS or IDC.
    """
    labels = xp.asarray(labels, dtype=int)
    if task == "3class":
        return labels
    elif task == "binary":
        return (labels != 0).astype(int)
    raise ValueError(f"Unknown task {task}, expected one of {TASKS}")


@dataclass(frozen=True)
class ForestConfig:
    """
    Random forest settings.

    Parameters
    ----------
    n_trees: int
        default=512
    max_features_scale: float
        Candidate features per node are
        :code:`ceil(max_features_scale * sqrt(d))`, default=1
    min_samples_leaf: int
        default=1
    seed: int
    n_classes: int, optional
        Inferred from the labels when not given
    """

    n_trees: int = 512
    max_features_scale: float = 1.0
    min_samples_leaf: int = 1
    seed: int = 0
    n_classes: int = None

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError(f"n_trees must be positive, got {self.n_trees}")
        if self.min_samples_leaf < 1:
            raise ValueError(f"min_samples_leaf must be positive, got {self.min_samples_leaf}")
        if self.max_features_scale <= 0:
            raise ValueError("max_features_scale must be positive")

    def max_features(self, n_features):
        return int(min(n_features, max(1, np.ceil(self.max_features_scale * np.sqrt(n_features)))))

    def to_dict(self):
        return asdict(self)


@dataclass
class DecisionTree:
    """
    A binary tree in flat array form.

    Node :code:`i` is a leaf when :code:`feature[i] == -1`, otherwise
    samples with :code:`x[feature[i]] <= threshold[i]` go to
    :code:`left[i]` and the rest to :code:`right[i]`. :code:`value[i]` is
    the class histogram of the training samples reaching the node.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.feature = xp.asarray(self.feature, dtype=xp.int64)
        self.threshold = xp.asarray(self.threshold, dtype=xp.float64)
        self.left = xp.asarray(self.left, dtype=xp.int64)
        self.right = xp.asarray(self.right, dtype=xp.int64)
        self.value = xp.atleast_2d(xp.asarray(self.value, dtype=xp.int64))

    @property
    def n_nodes(self):
        return len(self.feature)

    @property
    def leaves(self):
        return xp.flatnonzero(self.feature < 0)

    def apply(self, features):
        """
        Index of the leaf reached by every row.
        """
        node = xp.zeros(len(features), dtype=xp.int64)
        rows = xp.arange(len(features))
        while True:
            internal = self.feature[node] >= 0
            if not internal.any():
                return node
            active = rows[internal]
            current = node[active]
            goes_left = (
                features[active, self.feature[current]] <= self.threshold[current]
            )
            node[active] = xp.where(goes_left, self.left[current], self.right[current])

    def predict_proba(self, features):
        histograms = self.value[self.apply(features)].astype(xp.float64)
        return histograms / histograms.sum(axis=1, keepdims=True)

    def to_dict(self):
        return dict(
            feature=self.feature.tolist(),
            threshold=[repr(float(value)) for value in self.threshold],
            left=self.left.tolist(),
            right=self.right.tolist(),
            value=self.value.tolist(),
        )

    @classmethod
    def from_dict(cls, data):
        return cls(
            feature=data["feature"],
            threshold=[float(value) for value in data["threshold"]],
            left=data["left"],
            right=data["right"],
            value=data["value"],
        )


def _gini(counts, totals):
    fractions = counts / totals[:, None]
    return 1 - xp.sum(fractions**2, axis=1)


def _best_split(values, targets, n_classes, min_samples_leaf):
    n_samples = len(values)
    order = xp.argsort(values, kind="stable")
    values = values[order]
    onehot = xp.eye(n_classes, dtype=xp.int64)[targets[order]]
    left = xp.cumsum(onehot, axis=0)[:-1]
    right = left[-1] + onehot[-1] - left
    n_left = xp.arange(1, n_samples)
    n_right = n_samples - n_left
    valid = (
        (values[:-1] < values[1:])
        & (n_left >= min_samples_leaf)
        & (n_right >= min_samples_leaf)
    )
    if not valid.any():
        return None
    impurity = (n_left * _gini(left, n_left) + n_right * _gini(right, n_right)) / n_samples
    impurity = xp.where(valid, impurity, xp.inf)
    position = int(xp.argmin(impurity))
    lower, upper = values[position], values[position + 1]
    threshold = (lower + upper) / 2
    if not lower <= threshold < upper:
        threshold = lower
    return float(impurity[position]), float(threshold)


@autodoc
def fit_tree(features, targets, n_classes, rng, max_features, min_samples_leaf=1):
    """
    Grow one unpruned classification tree.

    At every node a random permutation of the features is drawn and the first
    :code:`max_features` are searched for the lowest weighted Gini impurity
    split. When none of them can split the node, the remaining features are
    tried in the same order.

    Parameters
    ----------
    features: array_like
        :code:`(n, d)` training rows
    targets: array_like
        Class indices
    n_classes: int
    {rng}
    max_features: int
    min_samples_leaf: int

    Returns
    -------
    DecisionTree
    """
    feature, threshold, left, right, value = list(), list(), list(), list(), list()

    def new_node(indices):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(xp.bincount(targets[indices], minlength=n_classes))
        return len(feature) - 1

    stack = [(new_node(xp.arange(len(targets))), xp.arange(len(targets)))]
    while stack:
        node, indices = stack.pop()
        if len(indices) < max(2, 2 * min_samples_leaf) or xp.count_nonzero(value[node]) < 2:
            continue
        best = None
        candidates = rng.permutation(features.shape[1])
        for tried, candidate in enumerate(candidates):
            if tried >= max_features and best is not None:
                break
            split = _best_split(
                features[indices, candidate], targets[indices], n_classes, min_samples_leaf
            )
            if split is not None and (best is None or split[0] < best[0]):
                best = (split[0], split[1], int(candidate))
        if best is None:
            continue
        _, cut, column = best
        goes_left = features[indices, column] <= cut
        feature[node] = column
        threshold[node] = cut
        left[node] = new_node(indices[goes_left])
        right[node] = new_node(indices[~goes_left])
        stack.append((right[node], indices[~goes_left]))
        stack.append((left[node], indices[goes_left]))
    return DecisionTree(feature, threshold, left, right, xp.array(value))


@dataclass
class ForestModel:
    """
    A fitted random forest.

    Parameters
    ----------
    trees: list[DecisionTree]
    n_classes: int
    n_features: int
    config: ForestConfig
    """

    trees: list
    n_classes: int
    n_features: int
    config: ForestConfig = field(default_factory=ForestConfig)

    @property
    def n_trees(self):
        return len(self.trees)

    def to_dict(self):
        return dict(
            format=MODEL_FORMAT,
            n_classes=self.n_classes,
            n_features=self.n_features,
            config=self.config.to_dict(),
            trees=[tree.to_dict() for tree in self.trees],
        )

    @classmethod
    def from_dict(cls, data):
        if data.get("format") != MODEL_FORMAT:
            raise ContractError("Not a forest model")
        return cls(
            trees=[DecisionTree.from_dict(tree) for tree in data["trees"]],
            n_classes=data["n_classes"],
            n_features=data["n_features"],
            config=ForestConfig(**data["config"]),
        )


def _check_training_data(features, labels):
    features = xp.asarray(features, dtype=xp.float64)
    labels = xp.asarray(labels, dtype=int).reshape(-1)
    if features.ndim != 2 or len(features) != len(labels):
        raise ShapeError("Expected (n, d) features and n labels", features.shape, labels.shape)
    if not xp.all(xp.isfinite(features)):
        raise ContractError("Features contain non-finite values")
    if len(xp.unique(labels)) < 2:
        raise ContractError("At least two classes are needed to train a forest")
    if labels.min() < 0:
        raise ContractError("Class indices must be non-negative")
    return features, labels


def _bootstrap(seed, tree, n_samples):
    generator = rng(seed, "bootstrap", tree)
    return generator, generator.integers(0, n_samples, n_samples)


def train_forest(features, labels, config=None, threads=1):
    """
    Fit a random forest.

    Tree :code:`t` draws its bootstrap sample and feature choices from the
    :code:`("bootstrap", t)` stream of the seed, so the model does not
    depend on the number of threads.

    Parameters
    ----------
    features: array_like
        :code:`(n, d)` feature rows
    labels: array_like
        Class indices, at least two distinct values
    config: ForestConfig, optional
    threads: int

    Returns
    -------
    ForestModel
    """
    config = config or ForestConfig()
    features, labels = _check_training_data(features, labels)
    n_classes = config.n_classes or int(labels.max()) + 1
    if labels.max() >= n_classes:
        raise ContractError(f"Labels exceed the {n_classes} configured classes")
    max_features = config.max_features(features.shape[1])

    def grow(tree):
        generator, sample = _bootstrap(config.seed, tree, len(labels))
        return fit_tree(
            features[sample], labels[sample], n_classes, generator,
            max_features, min_samples_leaf=config.min_samples_leaf,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trees = list(pool.map(grow, range(config.n_trees)))
    else:
        trees = [grow(tree) for tree in range(config.n_trees)]
    logger.info("Trained %d trees on %d slides with %d features",
                config.n_trees, *features.shape)
    return ForestModel(trees, n_classes, features.shape[1], config=config)


def _check_features(model, features):
    features = xp.atleast_2d(xp.asarray(features, dtype=xp.float64))
    if features.ndim != 2 or features.shape[1] != model.n_features:
        raise ShapeError(
            f"The model expects {model.n_features} features", features.shape
        )
    return features


def predict_proba(model, features):
    """
    Mean of the per-tree leaf class frequencies.

    Returns
    -------
    array_like
        :code:`(n, n_classes)` probabilities
    """
    features = _check_features(model, features)
    total = xp.zeros((len(features), model.n_classes))
    for tree in model.trees:
        total += tree.predict_proba(features)
    return total / model.n_trees


def predict(model, features):
    """
    Most probable class per row, ties go to the lowest class.
    """
    return xp.argmax(predict_proba(model, features), axis=1)


def oob_score(model, features, labels):
    """
    Out-of-bag accuracy of a forest on its own training data.

    Each row is predicted by the trees whose bootstrap sample did not draw
    it. Rows drawn by every tree are ignored.
    """
    features = _check_features(model, features)
    labels = xp.asarray(labels, dtype=int)
    votes = xp.zeros((len(features), model.n_classes))
    for index, tree in enumerate(model.trees):
        _, sample = _bootstrap(model.config.seed, index, len(labels))
        outside = xp.ones(len(labels), dtype=bool)
        outside[sample] = False
        if outside.any():
            votes[outside] += tree.predict_proba(features[outside])
    scored = votes.sum(axis=1) > 0
    if not scored.any():
        raise ContractError("No out-of-bag samples, use more trees")
    return float(xp.mean(xp.argmax(votes[scored], axis=1) == labels[scored]))


def split_counts(model):
    """
    Number of internal nodes splitting on each feature.
    """
    counts = xp.zeros(model.n_features, dtype=xp.int64)
    for tree in model.trees:
        used = tree.feature[tree.feature >= 0]
        counts += xp.bincount(used, minlength=model.n_features)
    return counts


def cross_validate(features, labels, config=None, grid=None, folds=5, threads=1):
    """
    Pick forest settings by k-fold cross-validated accuracy.

    Parameters
    ----------
    features, labels: array_like
    config: ForestConfig, optional
        The base settings, grid values replace its fields
    grid: dict, optional
        Candidate values per :class:`ForestConfig` field, defaults to
        :code:`max_features_scale` in (0.5, 1, 2) and
        :code:`min_samples_leaf` in (1, 2, 4)
    folds: int

    Returns
    -------
    best: ForestConfig
    scores: list[tuple]
        :code:`(settings, mean accuracy)` for every grid point
    """
    config = config or ForestConfig()
    features, labels = _check_training_data(features, labels)
    grid = grid or dict(max_features_scale=(0.5, 1.0, 2.0), min_samples_leaf=(1, 2, 4))
    if folds < 2 or folds > len(labels):
        raise ContractError(f"Cannot split {len(labels)} rows into {folds} folds")
    n_classes = config.n_classes or int(labels.max()) + 1
    order = rng(config.seed, "folds").permutation(len(labels))
    splits = xp.array_split(order, folds)
    names = sorted(grid)
    scores = list()
    for values in product(*(grid[name] for name in names)):
        settings = dict(zip(names, values))
        candidate = replace(config, n_classes=n_classes, **settings)
        accuracies = list()
        for held_out in splits:
            train = xp.setdiff1d(order, held_out)
            model = train_forest(features[train], labels[train], candidate, threads=threads)
            accuracies.append(xp.mean(predict(model, features[held_out]) == labels[held_out]))
        scores.append((settings, float(xp.mean(accuracies))))
        logger.debug("Cross-validation %s accuracy %.4f", settings, scores[-1][1])
    best_settings, best_score = max(scores, key=lambda item: item[1])
    logger.info("Best forest settings %s with accuracy %.4f", best_settings, best_score)
    return replace(config, **best_settings), scores


def save_forest(model, path):
    with open(path, "w") as ff:
        json.dump(model.to_dict(), ff)


def load_forest(path):
    with open(path) as ff:
        return ForestModel.from_dict(json.load(ff))

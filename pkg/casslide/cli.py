"""
Command line interface, every pipeline stage is a sub-command.

Stages communicate through files only::

    casslide synth --dataset data
    casslide train-patch --dataset data --models models
    casslide mine --dataset data --models models
    casslide train-stacked --dataset data --models models --window 768
    casslide predict --dataset data --models models --outputs out --window 768
    casslide features --dataset data --outputs out
    casslide train-forest --dataset data --models models --outputs out --task 3class
    casslide classify --dataset data --models models --outputs out --task 3class
    casslide evaluate --outputs out --task 3class

Exit codes are 0 on success, 1 for usage errors and 2 when inputs are
missing or violate a data contract.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from importlib import resources

import numpy as np
from PIL import Image

from . import forest, geometry, metrics
from .config import (
    FEATURES_NAME,
    MAPS_DIRECTORY,
    MEAN_RGB_NAME,
    MINED_REGIONS_NAME,
    MINED_WRN_NAME,
    WRN_NAME,
    archive_config,
    build_section,
    load_config,
)
from .constants import CLASS_NAMES, WINDOW_SIZES
from .data import (
    BINARY,
    THREE_CLASS,
    PatchDataset,
    SlideDataset,
    compute_mean_rgb,
    load_mean_rgb,
    save_mean_rgb,
)
from .stacked import (
    ProbabilityMap,
    StackedConfig,
    build_stacked,
    load_stacked,
    predict_slide,
    render_heatmap,
    save_stacked,
)
from .synth import generate
from .training import hard_negative_mine, regions_from_dict, regions_to_dict, train
from .utils import ContractError, setup_logging
from .wrn import build_wrn, load_wrn, save_wrn

xp = np

logger = logging.getLogger(__name__)

FIXTURES = dict(reference="reference_predictions.json")

__all__ = ["build_parser", "main"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _classification_name(task):
    return f"classification_{task}.json"


def _forest_name(task):
    return f"forest_{task}.json"


def _check_window(window):
    if window not in WINDOW_SIZES:
        raise ContractError(f"Window must be one of {WINDOW_SIZES}, got {window}")


def _load_image(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with Image.open(path) as image:
        return xp.asarray(image.convert("RGB"))


def _patch_classes(config):
    return BINARY if config.wrn.num_classes == 2 else THREE_CLASS


def _patch_datasets(dataset, classes):
    training = dataset.split("train")
    if not training:
        raise ContractError(f"{dataset.root} has no training slides")
    train_set = PatchDataset.from_slides(dataset, training, classes=classes)
    validation = dataset.split("val")
    val_set = PatchDataset.from_slides(dataset, validation, classes=classes) if validation else None
    return training, train_set, val_set


def run_synth(config, args):
    generate(config.synth, config.dataset, threads=config.n_threads)
    archive_config(config, config.dataset)


def run_train_patch(config, args):
    dataset = SlideDataset(config.dataset)
    os.makedirs(config.models, exist_ok=True)
    mean_rgb = compute_mean_rgb(dataset, "train")
    save_mean_rgb(mean_rgb, config.path("models", MEAN_RGB_NAME))
    _, train_set, val_set = _patch_datasets(dataset, _patch_classes(config))
    network = build_wrn(config.wrn, seed=config.seed)
    train(
        network, train_set, config.patch_train_config(), mean_rgb, validation=val_set,
        log_path=config.path("models", "wrn_log.csv"), progress=args.progress,
    )
    save_wrn(network, config.path("models", WRN_NAME))
    archive_config(config, config.models)


def run_mine(config, args):
    dataset = SlideDataset(config.dataset)
    mean_rgb = load_mean_rgb(config.path("models", MEAN_RGB_NAME))
    network = load_wrn(config.path("models", WRN_NAME))
    training, train_set, val_set = _patch_datasets(dataset, _patch_classes(config))
    benign = [index for index, slide in enumerate(training) if slide.label == 0]
    regions = hard_negative_mine(
        network, [train_set.images[index] for index in benign], mean_rgb,
        tile=network.config.patch_size, slide_indices=benign,
    )
    slide_ids = [slide.slide_id for slide in training]
    with open(config.path("models", MINED_REGIONS_NAME), "w") as ff:
        json.dump(regions_to_dict(regions, slide_ids, network.config.patch_size), ff)
    train_set.add_regions(regions)
    train(
        network, train_set, config.patch_train_config(), mean_rgb, validation=val_set,
        log_path=config.path("models", "wrn_mined_log.csv"), progress=args.progress,
    )
    save_wrn(network, config.path("models", MINED_WRN_NAME))
    archive_config(config, config.models)


def _add_mined_regions(config, training, train_set):
    path = config.path("models", MINED_REGIONS_NAME)
    if not os.path.exists(path):
        return
    with open(path) as ff:
        data = json.load(ff)
    slide_ids = [slide.slide_id for slide in training]
    regions = regions_from_dict(data, slide_ids, train_set.images)
    train_set.add_regions(regions)
    logger.info("Added %d mined regions from %s", len(regions), path)


def run_train_stacked(config, args):
    _check_window(config.window)
    dataset = SlideDataset(config.dataset)
    mean_rgb = load_mean_rgb(config.path("models", MEAN_RGB_NAME))
    base_path = config.path("models", MINED_WRN_NAME)
    if not os.path.exists(base_path):
        logger.warning("No mined patch network in %s, stacking on %s", config.models, WRN_NAME)
        base_path = config.path("models", WRN_NAME)
    base = load_wrn(base_path).freeze()
    if base.config.num_classes != 3:
        logger.info("Stacking on a %d class patch network", base.config.num_classes)
    stacked_config = StackedConfig(training_patch_size=config.window, window_stride=config.stride)
    stacked = build_stacked(base, stacked_config, seed=config.seed)
    training, train_set, val_set = _patch_datasets(dataset, THREE_CLASS)
    _add_mined_regions(config, training, train_set)
    train(
        stacked, train_set, config.stacked_train_config(), mean_rgb, validation=val_set,
        log_path=config.path("models", f"stacked_{config.window}_log.csv"),
        progress=args.progress,
    )
    save_stacked(stacked, config.path("models", config.stacked_name()))
    archive_config(config, config.models)


def _predict_one(stacked, image, name, mean_rgb, spacing, config, args):
    directory = config.path("outputs", MAPS_DIRECTORY)
    os.makedirs(directory, exist_ok=True)
    probability_map = predict_slide(
        stacked, image, mean_rgb, pixel_spacing_um=spacing, threads=config.n_threads,
        progress=args.progress,
    )
    probability_map.save(os.path.join(directory, f"{name}.probmap"))
    render_heatmap(probability_map, os.path.join(directory, f"{name}.png"))
    logger.info("Predicted %s on a %dx%d grid", name, *probability_map.shape)


def run_predict(config, args):
    _check_window(config.window)
    stacked = load_stacked(config.path("models", config.stacked_name()))
    if stacked.config.window_stride != config.stride:
        stacked.config = replace(stacked.config, window_stride=config.stride)
    mean_rgb = load_mean_rgb(config.path("models", MEAN_RGB_NAME))
    if args.image is not None:
        name = os.path.splitext(os.path.basename(args.image))[0]
        _predict_one(stacked, _load_image(args.image), name, mean_rgb, args.spacing,
                     config, args)
    else:
        dataset = SlideDataset(config.dataset)
        slides = dataset.split(*args.split) if args.split else dataset.slides
        for slide in slides:
            _predict_one(stacked, dataset.load_image(slide), slide.slide_id, mean_rgb,
                         dataset.pixel_spacing_um, config, args)
    archive_config(config, config.outputs)


def run_features(config, args):
    dataset = SlideDataset(config.dataset)
    rows = list()
    for slide in dataset.slides:
        path = config.path("outputs", MAPS_DIRECTORY, f"{slide.slide_id}.probmap")
        label_map = geometry.argmax_label_map(ProbabilityMap.load(path))
        rows.append(geometry.assemble_features(label_map, threads=config.n_threads))
    geometry.write_feature_csv(
        config.path("outputs", FEATURES_NAME),
        [slide.slide_id for slide in dataset.slides],
        [slide.label for slide in dataset.slides],
        xp.array(rows).reshape(-1, geometry.N_FEATURES),
    )
    archive_config(config, config.outputs)


def _feature_rows(config, splits):
    dataset = SlideDataset(config.dataset)
    slide_ids, labels, features = geometry.read_feature_csv(
        config.path("outputs", FEATURES_NAME)
    )
    wanted = {slide.slide_id for slide in dataset.split(*splits)}
    keep = xp.array([slide_id in wanted for slide_id in slide_ids], dtype=bool)
    if not keep.any():
        raise ContractError(f"No feature rows for the {'/'.join(splits)} split")
    return [slide_id for slide_id, kept in zip(slide_ids, keep) if kept], labels[keep], features[keep]


def run_train_forest(config, args):
    _, labels, features = _feature_rows(config, ("train", "val"))
    targets = forest.task_labels(labels, args.task)
    n_classes = 2 if args.task == "binary" else len(CLASS_NAMES)
    forest_config = config.forest_config(n_classes=n_classes)
    if args.cross_validate:
        forest_config, _ = forest.cross_validate(
            features, targets, config=forest_config, threads=config.n_threads
        )
    model = forest.train_forest(features, targets, forest_config, threads=config.n_threads)
    logger.info("Out-of-bag accuracy %.4f", forest.oob_score(model, features, targets))
    os.makedirs(config.models, exist_ok=True)
    forest.save_forest(model, config.path("models", _forest_name(args.task)))
    archive_config(config, config.models)


def run_classify(config, args):
    slide_ids, labels, features = _feature_rows(config, tuple(args.split or ("test",)))
    model = forest.load_forest(config.path("models", _forest_name(args.task)))
    probabilities = forest.predict_proba(model, features)
    predicted = xp.argmax(probabilities, axis=1)
    targets = forest.task_labels(labels, args.task)
    result = dict(
        task=args.task,
        class_names=_class_names(args.task),
        slides=[
            dict(slide_id=slide_id, label=int(label), predicted=int(guess),
                 probabilities=[float(value) for value in row])
            for slide_id, label, guess, row in zip(slide_ids, targets, predicted, probabilities)
        ],
    )
    os.makedirs(config.outputs, exist_ok=True)
    with open(config.path("outputs", _classification_name(args.task)), "w") as ff:
        json.dump(result, ff, indent=2)
    archive_config(config, config.outputs)


def _class_names(task):
    return list(CLASS_NAMES) if task == "3class" else ["benign", "cancer"]


def _read_classification(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as ff:
        try:
            result = json.load(ff)
        except json.JSONDecodeError as error:
            raise ContractError(f"{path} is not valid JSON: {error}") from error
    missing = {"class_names", "slides"} - set(result)
    if missing:
        raise ContractError(f"{path} is missing {sorted(missing)}")
    for entry in result["slides"]:
        if "label" not in entry or "predicted" not in entry:
            raise ContractError(f"{path} has a slide without label or prediction")
    return result


def fixture_path(name):
    if name not in FIXTURES:
        raise ContractError(f"Unknown fixture {name}, expected one of {sorted(FIXTURES)}")
    return str(resources.files("casslide") / "fixtures" / FIXTURES[name])


def run_evaluate(config, args):
    if args.fixture is not None:
        result = _read_classification(fixture_path(args.fixture))
        stem = args.fixture
    else:
        result = _read_classification(config.path("outputs", _classification_name(args.task)))
        stem = result.get("task", args.task)
    names = result["class_names"]
    slides = result["slides"]
    if not slides:
        raise ContractError("No classified slides to evaluate")
    labels = [entry["label"] for entry in slides]
    predicted = [entry["predicted"] for entry in slides]
    cm = metrics.confusion_matrix(labels, predicted, len(names))
    scores = None
    if len(names) == 2 and all("probabilities" in entry for entry in slides):
        scores = [entry["probabilities"][1] for entry in slides]
    report = metrics.evaluation_report(
        cm, scores=scores, labels=labels if scores else None, class_names=names
    )
    os.makedirs(config.outputs, exist_ok=True)
    metrics.write_report(report, config.path("outputs", f"report_{stem}.json"))
    if scores is not None:
        fpr, tpr = xp.array(report["roc"]).T
        metrics.plot_roc(
            fpr, tpr, config.path("outputs", f"roc_{stem}.png"), auc=report["auc"]
        )
    print(json.dumps({key: report[key] for key in ("accuracy", "kappa", "auc") if key in report}))
    archive_config(config, config.outputs)


def run_pipeline(config, args):
    if not os.path.exists(os.path.join(config.dataset, "index.json")):
        if not args.synth:
            raise FileNotFoundError(os.path.join(config.dataset, "index.json"))
        run_synth(config, args)
    run_train_patch(config, args)
    run_mine(config, args)
    run_train_stacked(config, args)
    args.image = None
    args.split = None
    args.fixture = None
    run_predict(config, args)
    run_features(config, args)
    for task in forest.TASKS:
        args.task = task
        run_train_forest(config, args)
        run_classify(config, args)
        run_evaluate(config, args)


COMMANDS = {
    "synth": (run_synth, "Generate a synthetic dataset"),
    "train-patch": (run_train_patch, "Train the wide residual patch network"),
    "mine": (run_mine, "Hard negative mining and fine tuning of the patch network"),
    "train-stacked": (run_train_stacked, "Train the stacked network on a frozen base"),
    "predict": (run_predict, "Dense probability maps and heatmaps"),
    "features": (run_features, "Slide feature table from probability maps"),
    "train-forest": (run_train_forest, "Train a random forest slide classifier"),
    "classify": (run_classify, "Classify slides with a trained forest"),
    "evaluate": (run_evaluate, "Accuracy, kappa and ROC report"),
    "pipeline": (run_pipeline, "Run every stage in order"),
}


def build_parser():
    parser = _Parser(prog="casslide", description=__doc__.splitlines()[1])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--dataset", help="Dataset directory")
    common.add_argument("--models", help="Model directory")
    common.add_argument("--outputs", help="Output directory")
    common.add_argument("--seed", type=int, help="Root random seed")
    common.add_argument("--threads", type=int, help="Worker threads")
    common.add_argument("--deterministic", action="store_true",
                        help="Single thread, reproducible outputs")
    common.add_argument("--progress", action="store_true", help="Show progress bars")
    common.add_argument("-v", "--verbose", action="count", default=0)
    subparsers = parser.add_subparsers(dest="command", required=True)
    parsers = dict()
    for name, (_, summary) in COMMANDS.items():
        parsers[name] = subparsers.add_parser(name, parents=[common], help=summary)
    for name in ("train-stacked", "predict", "pipeline"):
        parsers[name].add_argument("--window", type=int, choices=WINDOW_SIZES)
    for name in ("train-forest", "classify", "evaluate"):
        parsers[name].add_argument("--task", choices=forest.TASKS, default="3class")
    for name in ("predict", "classify"):
        parsers[name].add_argument("--split", nargs="+", choices=("train", "val", "test"))
    parsers["predict"].add_argument("--image", help="Predict a single RGB image")
    parsers["predict"].add_argument("--spacing", type=float, default=1.0,
                                    help="Pixel spacing of --image in micrometers")
    for name in ("train-forest", "pipeline"):
        parsers[name].add_argument("--cross-validate", action="store_true",
                                   help="Tune the forest by 5-fold cross-validation")
    parsers["evaluate"].add_argument("--fixture", choices=sorted(FIXTURES),
                                     help="Evaluate a shipped prediction fixture")
    parsers["synth"].add_argument("--slides-per-class", type=int)
    parsers["synth"].add_argument("--image-size", type=int)
    parsers["synth"].add_argument("--pixel-spacing", type=float)
    parsers["pipeline"].add_argument("--synth", action="store_true",
                                     help="Generate a synthetic dataset if none exists")
    return parser


def _configure(args):
    config = load_config(args.config)
    config = config.update(
        dataset=args.dataset,
        models=args.models,
        outputs=args.outputs,
        seed=args.seed,
        threads=args.threads,
        window=getattr(args, "window", None),
    )
    if args.deterministic:
        config = config.update(deterministic=True)
    if args.command in ("synth", "pipeline"):
        synth = config.synth.to_dict()
        synth.update(
            {key: value for key, value in dict(
                n_slides_per_class=getattr(args, "slides_per_class", None),
                image_size=getattr(args, "image_size", None),
                pixel_spacing_um=getattr(args, "pixel_spacing", None),
            ).items() if value is not None},
            seed=config.seed,
        )
        config = config.update(synth=build_section(type(config.synth), synth, "synth"))
    return config


def main(argv=None):
    """
    Run one command and return its exit code.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    command, _ = COMMANDS[args.command]
    try:
        config = _configure(args)
        command(config, args)
    except (ContractError, FileNotFoundError) as error:
        logger.error("%s failed: %s", args.command, error)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

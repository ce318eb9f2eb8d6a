"""
Slide-level features from dense probability maps.

A :class:`casslide.stacked.ProbabilityMap` is reduced to a label map by
taking the most probable class of every tissue cell. From the label map we
compute global lesion statistics and, for DCIS and IDC separately,
architectural statistics of the area-Voronoi partition seeded at the lesion
centroids and of the Delaunay graph over the same centroids.

All computations are in cell units and scaled by the physical cell spacing
at the end, so doubling the spacing multiplies every area by four and every
distance by two.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import Delaunay, QhullError
from skimage.measure import regionprops
from skimage.morphology import convex_hull_image

from .constants import (
    BACKGROUND,
    BENIGN,
    CLASS_NAMES,
    DCIS,
    IDC,
    IDC_MIN_AREA_UM2,
    NEIGHBOR_THRESHOLD_UM,
)
from .utils import ContractError, ShapeError, autodoc

xp = np

logger = logging.getLogger(__name__)

EIGHT_CONNECTED = xp.ones((3, 3), dtype=int)

GLOBAL_FEATURES = (
    "fraction_benign",
    "fraction_dcis",
    "fraction_idc",
    "fraction_cancer",
    "dcis_of_cancer",
    "idc_of_cancer",
    "idc_hull_ratio",
    "dcis_mean_area_um2",
    "idc_mean_area_um2",
)

_STATISTICS = ("mean", "median", "std")

VORONOI_FEATURES = tuple(
    f"voronoi_{metric}_{stat}"
    for metric in ("area_um2", "eccentricity", "tissue_ratio", "lesion_ratio")
    for stat in _STATISTICS
) + ("voronoi_largest_area_um2",)

DELAUNAY_FEATURES = tuple(
    f"delaunay_{metric}_{stat}"
    for metric in ("neighbors", "distance_um")
    for stat in _STATISTICS
) + ("delaunay_max_distance_um",)

FEATURE_NAMES = GLOBAL_FEATURES + tuple(
    f"{CLASS_NAMES[cls - 1]}_{name}"
    for cls in (DCIS, IDC)
    for name in VORONOI_FEATURES + DELAUNAY_FEATURES
)

N_FEATURES = len(FEATURE_NAMES)

__all__ = [
    "Component",
    "DELAUNAY_FEATURES",
    "FEATURE_NAMES",
    "GLOBAL_FEATURES",
    "LabelMap",
    "N_FEATURES",
    "VORONOI_FEATURES",
    "area_voronoi",
    "argmax_label_map",
    "assemble_features",
    "class_features",
    "connected_components",
    "delaunay_edges",
    "delaunay_features",
    "global_features",
    "read_feature_csv",
    "voronoi_features",
    "write_feature_csv",
]


@dataclass
class LabelMap:
    """
    Per-cell class labels of one slide.

    Parameters
    ----------
    labels: array_like
        Integer raster with values in :code:`{0, 1, 2, 3}`
    cell_spacing_um: float
        The physical edge of one cell in micrometers
    """

    labels: np.ndarray
    cell_spacing_um: float = 1.0

    def __post_init__(self):
        self.labels = xp.asarray(self.labels, dtype=xp.uint8)
        if self.labels.ndim != 2:
            raise ShapeError("A label map must be two dimensional", self.labels.shape)
        if xp.any(self.labels > IDC):
            raise ContractError(f"Label values must lie in [0, {IDC}]")
        if self.cell_spacing_um <= 0:
            raise ContractError(f"Cell spacing must be positive, got {self.cell_spacing_um}")

    @property
    def tissue(self):
        return self.labels != BACKGROUND


@dataclass(eq=False)
class Component:
    """
    One 8-connected region of a single class.

    Parameters
    ----------
    label: int
    cells: array_like
        :code:`(m, 2)` row and column indices in raster order
    cell_spacing_um: float
    """

    label: int
    cells: np.ndarray = field(repr=False)
    cell_spacing_um: float = 1.0

    @property
    def size(self):
        return len(self.cells)

    @property
    def area_um2(self):
        return self.size * self.cell_spacing_um**2

    @property
    def centroid(self):
        return self.cells.mean(axis=0)


def argmax_label_map(probability_map, tissue_mask=None):
    """
    Most probable class of every tissue cell, ties go to the lowest class.

    Parameters
    ----------
    probability_map: ProbabilityMap
    tissue_mask: array_like, optional
        Boolean grid, defaults to the non-background cells of the map

    Returns
    -------
    LabelMap
    """
    if tissue_mask is None:
        tissue_mask = probability_map.tissue
    tissue_mask = xp.asarray(tissue_mask, dtype=bool)
    if tissue_mask.shape != probability_map.shape:
        raise ShapeError("Tissue mask is not aligned with the grid",
                         tissue_mask.shape, probability_map.shape)
    labels = xp.argmax(probability_map.grid, axis=-1) + BENIGN
    labels[~tissue_mask] = BACKGROUND
    return LabelMap(labels, probability_map.cell_spacing_um)


@autodoc
def connected_components(label_map, cls):
    """
    8-connected regions of one class in raster discovery order.

    Parameters
    ----------
    {label_map}
    cls: int
        The label value

    Returns
    -------
    list[Component]
    """
    labelled, count = ndimage.label(label_map.labels == cls, structure=EIGHT_CONNECTED)
    if count == 0:
        return list()
    cells = xp.argwhere(labelled)
    ids = labelled[cells[:, 0], cells[:, 1]]
    order = xp.argsort(ids, kind="stable")
    splits = xp.cumsum(xp.bincount(ids)[1:])[:-1]
    return [
        Component(label=cls, cells=group, cell_spacing_um=label_map.cell_spacing_um)
        for group in xp.split(cells[order], splits)
    ]


def _large(components, min_area_um2):
    return [component for component in components if component.area_um2 >= min_area_um2]


def _hull_ratio(idc, tissue):
    sections, count = ndimage.label(tissue, structure=EIGHT_CONNECTED)
    ratios = list()
    for section in range(1, count + 1):
        lesion = idc & (sections == section)
        if not lesion.any():
            continue
        hull = convex_hull_image(lesion)
        ratios.append(lesion.sum() / max(hull.sum(), lesion.sum()))
    return float(xp.mean(ratios)) if ratios else 0.0


def _mean_area(components):
    if not components:
        return 0.0
    return float(xp.mean([component.area_um2 for component in components]))


@autodoc
def global_features(label_map, min_idc_area_um2=IDC_MIN_AREA_UM2):
    """
    Label fractions, the IDC convex hull ratio and mean lesion areas.

    The label fractions are relative to all non-background cells. IDC
    components smaller than :code:`min_idc_area_um2` are excluded from the
    hull ratio only. The hull ratio is the lesion area over its convex hull
    area, computed per tissue section and averaged over the sections
    containing IDC.

    Parameters
    ----------
    {label_map}
    min_idc_area_um2: float
        default=1500

    Returns
    -------
    array_like
        The nine values named in :data:`GLOBAL_FEATURES`
    """
    labels = label_map.labels
    tissue = label_map.tissue
    total = int(tissue.sum())
    if total == 0:
        raise ContractError("Cannot compute features of an all-background map")
    benign, dcis, idc = (int(xp.sum(labels == cls)) for cls in (BENIGN, DCIS, IDC))
    cancer = dcis + idc
    dcis_components = connected_components(label_map, DCIS)
    idc_components = connected_components(label_map, IDC)
    surviving = xp.zeros(labels.shape, dtype=bool)
    for component in _large(idc_components, min_idc_area_um2):
        surviving[component.cells[:, 0], component.cells[:, 1]] = True
    return xp.array(
        [
            benign / total,
            dcis / total,
            idc / total,
            cancer / total,
            dcis / cancer if cancer else 0.0,
            idc / cancer if cancer else 0.0,
            _hull_ratio(surviving, tissue),
            _mean_area(dcis_components),
            _mean_area(idc_components),
        ]
    )


@autodoc
def area_voronoi(components, tissue_mask, threads=1, chunk_size=4096):
    """
    Assign every tissue cell to the nearest component centroid.

    Distances are Euclidean in cell units and ties go to the lowest
    component index.

    Parameters
    ----------
    {components}
    {tissue_mask}
    {threads}
    chunk_size: int
        Cells assigned per task

    Returns
    -------
    array_like
        Integer raster with the region index of every tissue cell and
        :code:`-1` elsewhere
    """
    tissue_mask = xp.asarray(tissue_mask, dtype=bool)
    partition = xp.full(tissue_mask.shape, -1, dtype=xp.int64)
    if not components:
        return partition
    seeds = xp.array([component.centroid for component in components])
    cells = xp.argwhere(tissue_mask)

    def nearest(start):
        chunk = cells[start:start + chunk_size].astype(xp.float64)
        distances = ((chunk[:, None, :] - seeds[None, :, :]) ** 2).sum(axis=-1)
        return xp.argmin(distances, axis=1)

    starts = range(0, len(cells), chunk_size)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            assigned = list(pool.map(nearest, starts))
    else:
        assigned = [nearest(start) for start in starts]
    if assigned:
        partition[cells[:, 0], cells[:, 1]] = xp.concatenate(assigned)
    return partition


def _summary(values):
    values = xp.asarray(values, dtype=xp.float64)
    return [float(xp.mean(values)), float(xp.median(values)), float(xp.std(values))]


@autodoc
def voronoi_features(partition, lesion, tissue_mask, spacing=1.0, n_seeds=None):
    """
    Statistics of the area-Voronoi regions.

    Every non-empty region contributes its area, the eccentricity of the
    ellipse with the same second moments, its share of the tissue area and
    the share of its own area covered by lesion.

    Parameters
    ----------
    partition: array_like
        Output of :func:`area_voronoi`
    lesion: array_like
        Boolean raster of the lesion class
    {tissue_mask}
    {spacing}
    n_seeds: int, optional
        Number of seeds behind :code:`partition`, regions without cells
        are reported

    Returns
    -------
    array_like
        Mean, median and population standard deviation of each of the four
        region metrics followed by the largest region area, 13 values
    """
    regions = regionprops(xp.asarray(partition) + 1)
    if n_seeds is not None and len(regions) < n_seeds:
        logger.warning("Dropping %d empty Voronoi regions of %d", n_seeds - len(regions), n_seeds)
    if not regions:
        return xp.zeros(len(VORONOI_FEATURES))
    lesion = xp.asarray(lesion, dtype=bool)
    tissue_total = int(xp.sum(tissue_mask))
    counts = list()
    eccentricity = list()
    lesion_ratio = list()
    for region in regions:
        cells = region.coords
        counts.append(len(cells))
        eccentricity.append(float(region.eccentricity))
        lesion_ratio.append(lesion[cells[:, 0], cells[:, 1]].sum() / len(cells))
    counts = xp.asarray(counts, dtype=xp.float64)
    areas = counts * spacing**2
    return xp.array(
        _summary(areas)
        + _summary(eccentricity)
        + _summary(counts / tissue_total)
        + _summary(lesion_ratio)
        + [float(areas.max())]
    )


def _deduplicate(points, eps=1e-6):
    points = xp.array(points, dtype=xp.float64)
    _, first, inverse = xp.unique(points, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    if len(first) == len(points):
        return points
    logger.warning("Perturbing %d duplicate centroids", len(points) - len(first))
    seen = dict()
    for index, group in enumerate(inverse):
        repeat = seen.get(group, 0)
        seen[group] = repeat + 1
        if repeat:
            points[index] += eps * repeat * xp.array([1.0, 0.5])
    return points


def _path_edges(points):
    direction = points[-1] - points[0]
    if not xp.any(direction):
        direction = xp.array([1.0, 0.0])
    order = xp.argsort(points @ direction, kind="stable")
    return {tuple(sorted((int(a), int(b)))) for a, b in zip(order[:-1], order[1:])}


def delaunay_edges(points):
    """
    Edges of the Delaunay triangulation of 2-D points.

    One point has no edges, two points share one edge and collinear points
    are joined into a path. Duplicate points are separated by a 1e-6 shift.

    Parameters
    ----------
    points: array_like
        :code:`(n, 2)` coordinates

    Returns
    -------
    set[tuple]
        Index pairs :code:`(i, j)` with :code:`i < j`
    """
    points = _deduplicate(points)
    n_points = len(points)
    if n_points < 2:
        return set()
    if n_points == 2:
        return {(0, 1)}
    if xp.linalg.matrix_rank(points - points.mean(axis=0)) < 2:
        logger.debug("Centroids are collinear, using a path graph")
        return _path_edges(points)
    try:
        triangulation = Delaunay(points)
    except QhullError:
        logger.warning("Triangulation failed, treating centroids as collinear")
        return _path_edges(points)
    edges = set()
    for simplex in triangulation.simplices:
        for a, b in ((0, 1), (1, 2), (0, 2)):
            edges.add(tuple(sorted((int(simplex[a]), int(simplex[b])))))
    for point, _, vertex in triangulation.coplanar:
        edges.add(tuple(sorted((int(point), int(vertex)))))
    return edges


@autodoc
def delaunay_features(centroids, spacing=1.0, threshold_um=NEIGHBOR_THRESHOLD_UM):
    """
    Neighbourhood statistics of the Delaunay graph over lesion centroids.

    For every node we count the adjacent nodes closer than
    :code:`threshold_um` and average the distance to them, zero when there
    are none.

    Parameters
    ----------
    centroids: array_like
        :code:`(n, 2)` centroids in cell units
    {spacing}
    threshold_um: float
        default=1500

    Returns
    -------
    array_like
        Mean, median and standard deviation of the neighbour counts and
        average distances, and the largest average distance, 7 values
    """
    centroids = xp.asarray(centroids, dtype=xp.float64).reshape(-1, 2)
    n_nodes = len(centroids)
    if n_nodes == 0:
        return xp.zeros(len(DELAUNAY_FEATURES))
    neighbors = [list() for _ in range(n_nodes)]
    for a, b in sorted(delaunay_edges(centroids)):
        distance = float(xp.linalg.norm(centroids[a] - centroids[b])) * spacing
        if distance < threshold_um:
            neighbors[a].append(distance)
            neighbors[b].append(distance)
    counts = [len(distances) for distances in neighbors]
    averages = [float(xp.mean(distances)) if distances else 0.0 for distances in neighbors]
    return xp.array(_summary(counts) + _summary(averages) + [max(averages)])


def _canonical(components):
    return sorted(components, key=lambda component: tuple(component.cells[0]))


@autodoc
def class_features(components, label_map, cls, threads=1,
                   threshold_um=NEIGHBOR_THRESHOLD_UM):
    """
    The 20 Voronoi and Delaunay values of one lesion class.

    Components are put in raster order of their first cell, so the result
    does not depend on the order they are passed in.

    Parameters
    ----------
    {components}
    {label_map}
    cls: int
    {threads}
    threshold_um: float

    Returns
    -------
    array_like
    """
    n_values = len(VORONOI_FEATURES) + len(DELAUNAY_FEATURES)
    if not components:
        return xp.zeros(n_values)
    components = _canonical(components)
    tissue = label_map.tissue
    partition = area_voronoi(components, tissue, threads=threads)
    voronoi = voronoi_features(
        partition, label_map.labels == cls, tissue, spacing=label_map.cell_spacing_um,
        n_seeds=len(components),
    )
    centroids = xp.array([component.centroid for component in components])
    delaunay = delaunay_features(
        centroids, spacing=label_map.cell_spacing_um, threshold_um=threshold_um
    )
    return xp.concatenate([voronoi, delaunay])


@autodoc
def assemble_features(label_map, threads=1, min_idc_area_um2=IDC_MIN_AREA_UM2,
                      threshold_um=NEIGHBOR_THRESHOLD_UM):
    """
    The full slide feature vector.

    The order is 9 global values, 13 DCIS Voronoi, 7 DCIS Delaunay, 13 IDC
    Voronoi and 7 IDC Delaunay values, see :data:`FEATURE_NAMES`. A class
    without components contributes zeros.

    Parameters
    ----------
    {label_map}
    {threads}
    min_idc_area_um2: float
        IDC components below this area are not used as seeds, default=1500
    threshold_um: float
        Delaunay neighbour distance threshold, default=1500

    Returns
    -------
    array_like
        :data:`N_FEATURES` values
    """
    values = [global_features(label_map, min_idc_area_um2=min_idc_area_um2)]
    for cls in (DCIS, IDC):
        components = connected_components(label_map, cls)
        if cls == IDC:
            components = _large(components, min_idc_area_um2)
        values.append(
            class_features(components, label_map, cls, threads=threads,
                           threshold_um=threshold_um)
        )
    features = xp.concatenate(values)
    if len(features) != N_FEATURES:
        raise ShapeError(f"Expected {N_FEATURES} features", features.shape)
    return features


def write_feature_csv(path, slide_ids, labels, features):
    """
    Write one row per slide: id, label name, then the named features.
    """
    features = xp.atleast_2d(features)
    if features.shape[1] != N_FEATURES or len(features) != len(slide_ids):
        raise ShapeError("Features do not match the slide list",
                         features.shape, (len(slide_ids), N_FEATURES))
    with open(path, "w", newline="") as ff:
        writer = csv.writer(ff)
        writer.writerow(("slide_id", "label") + FEATURE_NAMES)
        for slide_id, label, row in zip(slide_ids, labels, features):
            writer.writerow([slide_id, CLASS_NAMES[int(label)]] + [repr(float(v)) for v in row])


def read_feature_csv(path):
    """
    Read a file written by :func:`write_feature_csv`.

    Returns
    -------
    slide_ids: list[str]
    labels: array_like
        Slide labels as class indices, 0 benign, 1 DCIS and 2 IDC
    features: array_like
    """
    with open(path, newline="") as ff:
        reader = csv.reader(ff)
        header = tuple(next(reader))
        if header[2:] != FEATURE_NAMES:
            raise ContractError(f"{path} does not have the expected feature columns")
        rows = list(reader)
    slide_ids = [row[0] for row in rows]
    try:
        labels = xp.array([CLASS_NAMES.index(row[1]) for row in rows], dtype=int)
    except ValueError as error:
        raise ContractError(f"Unknown slide label in {path}") from error
    features = xp.array([[float(v) for v in row[2:]] for row in rows]).reshape(-1, N_FEATURES)
    return slide_ids, labels, features

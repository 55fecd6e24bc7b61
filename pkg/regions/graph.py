"""Superpixel segmentation and the spatial region graph."""

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Literal, Optional, Sequence

import numpy as np
from scipy import ndimage
from skimage.segmentation import slic

from numeric.errors import InvalidArgumentError, NotFoundError

logger = logging.getLogger("gestalt.regions")

Metric = Literal["euclidean", "manhattan"]

# slic divides by compactness; zero means color-only clustering
MIN_COMPACTNESS = 1e-6


# =============================================================================
# Domain Types
# =============================================================================

def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class Image:
    """Row-major intensity grid in [0, 1], stored as (height, width, channels)."""
    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise InvalidArgumentError(f"channels must be 1 or 3, got {self.channels}")
        data = np.asarray(self.data, dtype=np.float64)
        if data.size != self.width * self.height * self.channels:
            raise InvalidArgumentError(
                f"data length {data.size} != {self.width}x{self.height}x{self.channels}")
        data = data.reshape(self.height, self.width, self.channels)
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise InvalidArgumentError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def from_array(cls, array) -> "Image":
        array = np.asarray(array, dtype=np.float64)
        if array.ndim == 2:
            array = array[:, :, None]
        if array.ndim != 3:
            raise InvalidArgumentError(f"expected a (H, W) or (H, W, C) array, got {array.shape}")
        h, w, c = array.shape
        return cls(width=w, height=h, channels=c, data=array)

    def to_array(self) -> np.ndarray:
        return self.data

    def intensity(self) -> np.ndarray:
        return self.data.mean(axis=2)

    @property
    def pixel_count(self) -> int:
        return self.width * self.height


@dataclass(frozen=True, eq=False)
class Region:
    id: int
    pixels: np.ndarray  # (n, 2) integer (x, y) in raster order
    centroid: tuple[float, float]
    feature: np.ndarray
    boundary: np.ndarray  # (m, 2) subset of pixels

    def __post_init__(self):
        if len(self.pixels) == 0:
            raise InvalidArgumentError(f"region {self.id} has no pixels")
        object.__setattr__(self, "pixels", _frozen(np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)))
        object.__setattr__(self, "boundary", _frozen(np.asarray(self.boundary, dtype=np.int64).reshape(-1, 2)))
        object.__setattr__(self, "feature", _frozen(np.asarray(self.feature, dtype=np.float64)))

    @property
    def area(self) -> int:
        return len(self.pixels)


@dataclass(frozen=True, eq=False)
class RegionGraph:
    regions: tuple
    edges: tuple  # (a, b, distance) with a < b
    width: int
    height: int
    labels: np.ndarray  # (height, width) region id per pixel
    image: Optional[Image] = None
    _adjacency: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "labels", _frozen(np.asarray(self.labels, dtype=np.int64)))
        adjacency = {r.id: [] for r in self.regions}
        for a, b, _ in self.edges:
            adjacency[a].append(b)
            adjacency[b].append(a)
        object.__setattr__(self, "_adjacency", {k: tuple(sorted(v)) for k, v in adjacency.items()})

    def __len__(self):
        return len(self.regions)

    def region(self, region_id: int) -> Region:
        if not 0 <= region_id < len(self.regions):
            raise NotFoundError(f"region {region_id} not in graph of {len(self.regions)} regions")
        return self.regions[region_id]

    def neighbors(self, region_id: int) -> tuple:
        self.region(region_id)
        return self._adjacency[region_id]

    def centroids(self) -> np.ndarray:
        return np.array([r.centroid for r in self.regions], dtype=np.float64)

    def features(self) -> np.ndarray:
        return np.stack([r.feature for r in self.regions])

    def areas(self) -> np.ndarray:
        return np.array([r.area for r in self.regions], dtype=np.int64)

    def hop_distances(self, start: int) -> np.ndarray:
        """Breadth-first hop counts from start; unreachable regions get inf."""
        self.region(start)
        hops = np.full(len(self.regions), np.inf)
        hops[start] = 0
        queue = deque([start])
        while queue:
            node = queue.popleft()
            for nxt in self._adjacency[node]:
                if hops[nxt] == np.inf:
                    hops[nxt] = hops[node] + 1
                    queue.append(nxt)
        return hops


# =============================================================================
# Distances and adjacency
# =============================================================================

def spatial_distance(a: Region, b: Region, metric: Metric = "euclidean") -> float:
    dx = a.centroid[0] - b.centroid[0]
    dy = a.centroid[1] - b.centroid[1]
    if metric == "euclidean":
        return math.hypot(dx, dy)
    if metric == "manhattan":
        return abs(dx) + abs(dy)
    raise InvalidArgumentError(f"unknown metric: {metric}")


def _label_map(regions: Sequence[Region]) -> np.ndarray:
    width = max(int(r.pixels[:, 0].max()) for r in regions) + 1
    height = max(int(r.pixels[:, 1].max()) for r in regions) + 1
    labels = np.full((height, width), -1, dtype=np.int64)
    for r in regions:
        xs, ys = r.pixels[:, 0], r.pixels[:, 1]
        if (labels[ys, xs] >= 0).any() or len(np.unique(ys * width + xs)) != len(xs):
            raise InvalidArgumentError(f"region {r.id} overlaps another region")
        labels[ys, xs] = r.id
    return labels


def _contact_pairs(labels: np.ndarray) -> list:
    found = []
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        touch = (a != b) & (a >= 0) & (b >= 0)
        found.append(np.column_stack([np.minimum(a[touch], b[touch]), np.maximum(a[touch], b[touch])]))
    if not any(len(f) for f in found):
        return []
    pairs = np.unique(np.concatenate(found), axis=0)
    return [(int(u), int(v)) for u, v in pairs]


def build_adjacency(regions: Sequence[Region]) -> list:
    """Edges between regions with 4-connected pixel contact, with centroid distance."""
    if not regions:
        return []
    labels = _label_map(regions)
    by_id = {r.id: r for r in regions}
    return [(a, b, spatial_distance(by_id[a], by_id[b], "euclidean"))
            for a, b in sorted(_contact_pairs(labels))]


# =============================================================================
# Features and graph construction
# =============================================================================

def region_features(image: Image, labels: np.ndarray, count: int) -> np.ndarray:
    """[mean per channel | intensity variance | centroid x/W, y/H] per region."""
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=count).astype(np.float64)
    pixels = image.data.reshape(-1, image.channels)
    means = np.stack([np.bincount(flat, weights=pixels[:, c], minlength=count) / sizes
                      for c in range(image.channels)], axis=1)
    intensity = image.intensity().ravel()
    mean_i = np.bincount(flat, weights=intensity, minlength=count) / sizes
    var_i = np.bincount(flat, weights=intensity ** 2, minlength=count) / sizes - mean_i ** 2
    ys, xs = np.divmod(np.arange(flat.size), image.width)
    cx = np.bincount(flat, weights=xs, minlength=count) / sizes
    cy = np.bincount(flat, weights=ys, minlength=count) / sizes
    return np.column_stack([means, np.maximum(var_i, 0.0),
                            (cx + 0.5) / image.width, (cy + 0.5) / image.height])


def _boundary_mask(labels: np.ndarray) -> np.ndarray:
    padded = np.pad(labels, 1, constant_values=-1)
    center = padded[1:-1, 1:-1]
    return ((padded[:-2, 1:-1] != center) | (padded[2:, 1:-1] != center)
            | (padded[1:-1, :-2] != center) | (padded[1:-1, 2:] != center))


def graph_from_labels(image: Image, labels: np.ndarray) -> RegionGraph:
    """Region graph for a label map whose ids are exactly 0..n-1."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (image.height, image.width):
        raise InvalidArgumentError(f"label map {labels.shape} does not match image "
                                   f"{image.height}x{image.width}")
    count = int(labels.max()) + 1 if labels.size else 0
    if labels.size == 0 or labels.min() < 0 or len(np.unique(labels)) != count:
        raise InvalidArgumentError("labels must cover ids 0..n-1 with no gaps")

    features = region_features(image, labels, count)
    boundary = _boundary_mask(labels)
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    starts = np.searchsorted(flat[order], np.arange(count + 1))
    ys, xs = np.divmod(order, image.width)
    on_border = boundary.ravel()[order]
    regions = []
    for rid in range(count):
        sl = slice(starts[rid], starts[rid + 1])
        pix = np.column_stack([xs[sl], ys[sl]])
        centroid = (float(pix[:, 0].mean()), float(pix[:, 1].mean()))
        regions.append(Region(id=rid, pixels=pix, centroid=centroid, feature=features[rid],
                              boundary=pix[on_border[sl]]))
    edges = [(a, b, spatial_distance(regions[a], regions[b])) for a, b in sorted(_contact_pairs(labels))]
    return RegionGraph(regions=tuple(regions), edges=tuple(edges), width=image.width,
                       height=image.height, labels=labels, image=image)


def attach_features(graph: RegionGraph, learned: np.ndarray) -> RegionGraph:
    """Append learned per-region features to each region's feature vector."""
    learned = np.asarray(learned, dtype=np.float64)
    if learned.ndim != 2 or learned.shape[0] != len(graph):
        raise InvalidArgumentError(f"expected ({len(graph)}, m) learned features, got {learned.shape}")
    regions = tuple(replace(r, feature=np.concatenate([r.feature, learned[r.id]])) for r in graph.regions)
    return replace(graph, regions=regions)


# =============================================================================
# SLIC
# =============================================================================

def _merge_orphans(image: Image, assign: np.ndarray, min_region: int) -> np.ndarray:
    """Split clusters into 4-connected components and merge fragments below min_region."""
    labels = np.full(assign.shape, -1, dtype=np.int64)
    orphans = []
    next_id = 0
    for cluster in np.unique(assign):
        components, n = ndimage.label(assign == cluster)
        if n == 0:
            continue
        sizes = np.bincount(components.ravel())[1:]
        body = int(np.argmax(sizes)) + 1
        for comp in range(1, n + 1):
            mask = components == comp
            if comp == body or sizes[comp - 1] >= min_region:
                labels[mask] = next_id
                next_id += 1
            else:
                orphans.append(mask)

    colors = image.data.reshape(-1, image.channels)
    pending = orphans
    while pending:
        deferred = []
        for mask in pending:
            ring = ndimage.binary_dilation(mask) & ~mask
            candidates = np.unique(labels[ring & (labels >= 0)])
            if candidates.size == 0:
                deferred.append(mask)
                continue
            own = colors[mask.ravel()].mean(axis=0)
            best = min(candidates.tolist(),
                       key=lambda lab: (float(((colors[(labels == lab).ravel()].mean(axis=0) - own) ** 2).sum()), lab))
            labels[mask] = best
        if len(deferred) == len(pending):
            raise InvalidArgumentError("segmentation left unattached fragments")
        pending = deferred

    # canonical ids: raster order of first pixel
    uniq, first = np.unique(labels.ravel(), return_index=True)
    rank = np.empty(uniq.size, dtype=np.int64)
    rank[np.argsort(first)] = np.arange(uniq.size)
    return rank[np.searchsorted(uniq, labels)]


def segment_slic(image: Image, k: int = 64, compactness: float = 0.1, iters: int = 10,
                 min_region: int = 4) -> RegionGraph:
    """SLIC superpixels over (x, y, channels) seeded on scikit-image's regular grid.

    Colors stay in their [0, 1] scale (no Lab conversion) so compactness trades
    one unit of color distance against one seed spacing. Fragments smaller than
    min_region join the adjacent region with the nearest mean color.
    """
    if image.width == 0 or image.height == 0:
        raise InvalidArgumentError("cannot segment a zero-sized image")
    if k < 1 or k > image.pixel_count:
        raise InvalidArgumentError(f"k={k} must lie in [1, {image.pixel_count}]")
    if compactness < 0:
        raise InvalidArgumentError(f"compactness must be nonnegative, got {compactness}")
    assign = slic(image.data, n_segments=k, compactness=max(compactness, MIN_COMPACTNESS),
                  max_num_iter=max(1, iters), sigma=0, convert2lab=False, enforce_connectivity=True,
                  min_size_factor=0.0, start_label=0, channel_axis=-1)
    labels = _merge_orphans(image, assign, min_region)
    graph = graph_from_labels(image, labels)
    logger.debug(f"SLIC: k={k} -> {len(graph)} regions, {len(graph.edges)} edges")
    return graph

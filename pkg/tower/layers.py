"""The four Gestalt layers and their gated combination into a prior."""

import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.cluster import KMeans

from numeric import tensor as nt
from numeric.errors import InvalidArgumentError
from numeric.tensor import Tensor
from regions.graph import Metric, RegionGraph

from .contours import ContourSet, complete_contour, fill_for_query, sobel_edge_map

logger = logging.getLogger("gestalt.tower")

LAYERS = ("proximity", "similarity", "closure", "continuity")


# =============================================================================
# Domain Types
# =============================================================================

@dataclass(frozen=True)
class ProximityParams:
    tau: float = 8.0
    metric: Metric = "euclidean"
    hops: float = math.inf

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidArgumentError(f"tau must be positive, got {self.tau}")
        if not self.hops >= 1:
            raise InvalidArgumentError(f"hops must be >= 1, got {self.hops}")
        if self.metric not in ("euclidean", "manhattan"):
            raise InvalidArgumentError(f"unknown metric {self.metric!r}")


@dataclass(frozen=True)
class TowerParams:
    """Everything the tower needs besides the graph and the query."""
    proximity: ProximityParams = ProximityParams()
    decay: float = 0.7
    bridge_gap_max: float = 5.0
    edge_threshold: float = 0.1
    entity_threshold: float = 0.01
    k_clusters: int = 0  # 0 disables the cluster restriction of the similarity layer
    cluster_seed: int = 0
    disabled: tuple = ()  # layer names masked out of the gate

    def __post_init__(self):
        if not 0 < self.decay < 1:
            raise InvalidArgumentError(f"decay must lie in (0, 1), got {self.decay}")
        unknown = set(self.disabled) - set(LAYERS)
        if unknown:
            raise InvalidArgumentError(f"unknown layers {sorted(unknown)}")


@dataclass(frozen=True, eq=False)
class GestaltPrior:
    weights: np.ndarray  # (n,) probability vector
    layer_contrib: np.ndarray  # (n, 4) normalized layer maps, columns in LAYERS order
    gate: np.ndarray  # (4,) convex coefficients

    def __post_init__(self):
        if not np.isclose(self.weights.sum(), 1.0, atol=1e-6) or (self.weights < 0).any():
            raise InvalidArgumentError("prior weights must be a probability vector")


def _normalize(weights: np.ndarray, support: Optional[np.ndarray] = None) -> np.ndarray:
    """Scale to sum 1; an all-zero vector becomes uniform over support."""
    total = weights.sum()
    if total > 0:
        return weights / total
    if support is None or not support.any():
        support = np.ones(len(weights), dtype=bool)
    return support / support.sum()


# =============================================================================
# Proximity and similarity
# =============================================================================

def proximity_weights(graph: RegionGraph, query: int, params: ProximityParams) -> np.ndarray:
    q = graph.region(query)
    centroids = graph.centroids()
    delta = centroids - np.asarray(q.centroid)
    if params.metric == "euclidean":
        dist = np.hypot(delta[:, 0], delta[:, 1])
    else:
        dist = np.abs(delta).sum(axis=1)
    reachable = graph.hop_distances(query) <= params.hops
    return _normalize(np.where(reachable, np.exp(-dist / params.tau), 0.0))


def similarity_weights(graph: RegionGraph, query_feature, restrict_to: Optional[np.ndarray] = None
                       ) -> np.ndarray:
    """Clipped cosine similarity to the query feature, normalized.

    restrict_to is a boolean mask over regions (the cluster-bias hook); regions
    outside it get weight 0.
    """
    feats = graph.features()
    q = np.asarray(query_feature, dtype=np.float64)
    if q.shape != (feats.shape[1],):
        raise InvalidArgumentError(f"query feature {q.shape} vs region features {feats.shape[1:]}")
    q_norm = np.linalg.norm(q)
    if q_norm == 0:
        raise InvalidArgumentError("query feature is the zero vector")
    f_norm = np.linalg.norm(feats, axis=1)
    cos = np.divide(feats @ q, f_norm * q_norm, out=np.zeros(len(feats)), where=f_norm > 0)
    weights = np.maximum(cos, 0.0)
    if restrict_to is not None:
        restrict_to = np.asarray(restrict_to, dtype=bool)
        weights = np.where(restrict_to, weights, 0.0)
    return _normalize(weights, restrict_to)


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Renumber cluster ids in order of first occurrence."""
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(len(order), dtype=np.int64)
    remap[order] = np.arange(len(order))
    return remap[np.searchsorted(np.unique(labels), labels)]


def cluster_regions(graph: RegionGraph, k: int, seed: int = 0) -> np.ndarray:
    n = len(graph)
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"k={k} must lie in [1, {n}]")
    if k == n:
        return np.arange(n)
    if k == 1:
        return np.zeros(n, dtype=np.int64)
    labels = KMeans(n_clusters=k, n_init=10, random_state=seed).fit_predict(graph.features())
    return _canonical(labels)


# =============================================================================
# Closure
# =============================================================================

def closure_layer(graph: RegionGraph, contours: Optional[ContourSet], query: Optional[int] = None
                  ) -> np.ndarray:
    """Fraction of each region inside the completed fill, normalized."""
    if contours is None:
        return _normalize(np.zeros(len(graph)))
    fill = None
    if query is not None:
        fill = fill_for_query(contours, graph.region(query).centroid)
    if fill is None:
        fill = contours.filled_mask()
    inside = np.bincount(graph.labels.ravel(), weights=fill.ravel().astype(np.float64),
                         minlength=len(graph))
    return _normalize(inside / graph.areas())


def contours_for(graph: RegionGraph, params: TowerParams) -> Optional[ContourSet]:
    if graph.image is None:
        return None
    return complete_contour(sobel_edge_map(graph.image, params.edge_threshold), params.bridge_gap_max)


# =============================================================================
# Continuity
# =============================================================================

def entity_mask(graph: RegionGraph, threshold: float, ground_truth=None, scores=None) -> np.ndarray:
    """Entity/background split per region.

    Ground truth wins when given; otherwise a region is an entity when its
    intensity variance or its learned entity score exceeds threshold.
    """
    if ground_truth is not None:
        mask = np.asarray(ground_truth, dtype=bool)
        if mask.shape != (len(graph),):
            raise InvalidArgumentError(f"entity mask {mask.shape} for {len(graph)} regions")
        return mask
    channels = graph.image.channels if graph.image is not None else graph.features().shape[1] - 3
    mask = graph.features()[:, channels] > threshold
    if scores is not None:
        mask |= np.asarray(scores, dtype=np.float64) > threshold
    return mask


def _entity_frontier(graph: RegionGraph, node: int, entity: np.ndarray) -> set:
    """Entity regions reachable from node through background-only paths."""
    found, seen = set(), {node}
    queue = deque([node])
    while queue:
        cur = queue.popleft()
        for nxt in graph.neighbors(cur):
            if nxt in seen:
                continue
            seen.add(nxt)
            if entity[nxt]:
                found.add(nxt)
            else:
                queue.append(nxt)
    return found


def entity_component(graph: RegionGraph, start: int, entity: np.ndarray) -> list:
    """Start plus every entity reachable from it, in BFS order."""
    order, seen = [start], {start}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for nxt in sorted(_entity_frontier(graph, cur, entity)):
            if nxt not in seen:
                seen.add(nxt)
                order.append(nxt)
                queue.append(nxt)
    return order


def trace_continuity_path(graph: RegionGraph, start: int, direction_scores, decay: float,
                          entity: Optional[np.ndarray] = None) -> np.ndarray:
    graph.region(start)
    if not 0 < decay < 1:
        raise InvalidArgumentError(f"decay must lie in (0, 1), got {decay}")
    entity = np.ones(len(graph), dtype=bool) if entity is None else np.asarray(entity, dtype=bool)
    weights = np.zeros(len(graph))

    scores = None if direction_scores is None else np.asarray(direction_scores, dtype=np.float64)
    if scores is not None and scores.shape != (len(graph),):
        raise InvalidArgumentError(f"{scores.shape} direction scores for {len(graph)} regions")
    if scores is None or np.all(scores == scores[0]):
        weights[entity_component(graph, start, entity)] = 1.0
        return _normalize(weights)

    visited, seen, stack = [start], {start}, [start]
    while stack:
        candidates = [c for c in _entity_frontier(graph, stack[-1], entity) if c not in seen]
        if not candidates:
            stack.pop()
            continue
        nxt = max(candidates, key=lambda c: (scores[c], -c))
        seen.add(nxt)
        visited.append(nxt)
        stack.append(nxt)
    weights[visited] = decay ** np.arange(len(visited), dtype=np.float64)
    return _normalize(weights)


# =============================================================================
# Combination
# =============================================================================

def gate_coefficients(logits, disabled: Sequence[str] = ()) -> np.ndarray:
    """Softmax over the gate logits; +inf entries share all mass, -inf get none."""
    z = np.array(logits, dtype=np.float64)
    if z.shape != (len(LAYERS),):
        raise InvalidArgumentError(f"gate needs {len(LAYERS)} logits, got {z.shape}")
    for name in disabled:
        z[LAYERS.index(name)] = -np.inf
    if np.isnan(z).any():
        raise InvalidArgumentError("gate logits contain NaN")
    top = np.isposinf(z)
    if top.any():
        return top / top.sum()
    if np.isneginf(z).all():
        raise InvalidArgumentError("every gestalt layer is disabled")
    e = np.exp(z - z[np.isfinite(z)].max())
    return e / e.sum()


def layer_maps(graph: RegionGraph, query: int, query_feature, text_guidance, params: TowerParams,
               contours: Optional[ContourSet] = None, entity: Optional[np.ndarray] = None
               ) -> np.ndarray:
    """The four normalized layer maps stacked as (4, n) in LAYERS order."""
    restrict = None
    if params.k_clusters:
        clusters = cluster_regions(graph, params.k_clusters, params.cluster_seed)
        restrict = clusters == clusters[query]
    if contours is None:
        contours = contours_for(graph, params)
    if entity is None:
        entity = entity_mask(graph, params.entity_threshold)
    return np.stack([
        proximity_weights(graph, query, params.proximity),
        similarity_weights(graph, query_feature, restrict_to=restrict),
        closure_layer(graph, contours, query),
        trace_continuity_path(graph, query, text_guidance, params.decay, entity=entity),
    ])


def gestalt_forward(graph: RegionGraph, query: int, query_feature, text_guidance, gate,
                    params: TowerParams = TowerParams(), contours: Optional[ContourSet] = None,
                    entity: Optional[np.ndarray] = None) -> GestaltPrior:
    coefficients = gate_coefficients(gate, params.disabled)
    maps = layer_maps(graph, query, query_feature, text_guidance, params, contours, entity)
    weights = coefficients @ maps
    logger.debug(f"gestalt prior for query {query}: gate={np.round(coefficients, 3).tolist()}")
    return GestaltPrior(weights=weights, layer_contrib=maps.T.copy(), gate=coefficients)


# =============================================================================
# Differentiable counterparts used by the trainable model
# =============================================================================

def similarity_layer(features: Tensor, query: Tensor) -> Tensor:
    """Clipped cosine similarity map over (n, F) region features."""
    cos = (features @ query) / (nt.row_norm(features) * nt.row_norm(query) + 1e-12)
    clipped = nt.relu(cos)
    total = nt.sum(clipped)
    if total.item() <= 0:
        return Tensor(np.full(features.shape[0], 1.0 / features.shape[0]))
    return clipped / total


def combine_layers(maps: Tensor, gate_logits: Tensor, disabled: Sequence[str] = ()) -> Tensor:
    """Softmax-gated convex combination of (4, n) layer maps."""
    mask = np.zeros(len(LAYERS))
    for name in disabled:
        mask[LAYERS.index(name)] = -np.inf
    coefficients = nt.softmax(gate_logits + Tensor(mask))
    return coefficients @ maps


def attention_prior(text_vector: Tensor, features: Tensor, w_query: Tensor, w_key: Tensor) -> Tensor:
    """Single-head scaled dot-product distribution over regions."""
    keys = features @ w_key
    query = text_vector @ w_query
    return nt.softmax((keys @ query) / math.sqrt(w_key.shape[1]))

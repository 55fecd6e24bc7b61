"""Contour tracing, virtual-bridge completion and the closure loss."""

import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage
from skimage.draw import line
from skimage.filters import sobel
from skimage.morphology import skeletonize

from numeric import tensor as nt
from numeric.errors import InvalidArgumentError
from numeric.tensor import Tensor
from regions.graph import Image, RegionGraph

logger = logging.getLogger("gestalt.tower")

MIN_CONTOUR_PIXELS = 3

# clockwise ring starting west, (dx, dy) with y pointing down
_RING = ((-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1))


# =============================================================================
# Domain Types
# =============================================================================

@dataclass(frozen=True, eq=False)
class ContourSet:
    contours: tuple  # ordered (n, 2) integer (x, y) chains
    closed_flags: tuple
    gap_endpoints: tuple  # ((x, y), (x, y)) per open contour, None when closed
    bridges: tuple  # virtual-bridge pixels inserted into each contour
    fills: tuple  # (H, W) interior mask per closed contour, None when open
    shape: tuple  # (height, width)

    def __len__(self):
        return len(self.contours)

    def filled_mask(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        for fill in self.fills:
            if fill is not None:
                out |= fill
        return out


# =============================================================================
# Edge maps and chain tracing
# =============================================================================

def sobel_edge_map(image: Image, threshold: float = 0.1) -> np.ndarray:
    """Sobel magnitude (max over channels) thresholded and thinned to 1-px chains."""
    magnitude = np.max([sobel(image.data[:, :, c]) for c in range(image.channels)], axis=0)
    return skeletonize(magnitude > threshold)


def _endpoint_map(mask: np.ndarray) -> np.ndarray:
    """Pixels whose 8-neighbourhood holds one contiguous run of at most two pixels."""
    p = np.pad(mask, 1).astype(np.int8)
    h, w = mask.shape
    ring = np.stack([p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dx, dy in _RING])
    count = ring.sum(axis=0)
    transitions = ((ring == 0) & (np.roll(ring, -1, axis=0) == 1)).sum(axis=0)
    return mask & (transitions == 1) & (count <= 2)


def _neighbors(pixel, members: set):
    x, y = pixel
    return [(x + dx, y + dy) for dx, dy in _RING if (x + dx, y + dy) in members]


def _geodesic(start, members: set) -> dict:
    parents = {start: None}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for nxt in _neighbors(cur, members):
            if nxt not in parents:
                parents[nxt] = cur
                queue.append(nxt)
    return parents


def _path_to(parents: dict, end) -> list:
    path = []
    while end is not None:
        path.append(end)
        end = parents[end]
    return path[::-1]


def _trace_open(members: set, endpoints: list) -> list:
    first = endpoints[0]
    parents = _geodesic(first, members)
    order = list(parents)  # BFS order: last entry is farthest
    far_candidates = [e for e in endpoints if e != first] or [order[-1]]
    depth = {first: 0}
    for node in order[1:]:
        depth[node] = depth[parents[node]] + 1
    second = max(far_candidates, key=lambda e: (depth[e], -e[1], -e[0]))
    parents = _geodesic(second, members)
    depth = {second: 0}
    for node in list(parents)[1:]:
        depth[node] = depth[parents[node]] + 1
    start = max([e for e in endpoints if e != second] or [first], key=lambda e: (depth[e], -e[1], -e[0]))
    return _path_to(parents, start)[::-1]


def _trace_closed(members: set) -> list:
    """Moore-neighbour boundary following from the raster-first pixel."""
    start = min(members, key=lambda p: (p[1], p[0]))
    chain = [start]
    back = 0  # index in _RING of the backtrack direction (west of start is empty)
    cur = start
    for _ in range(4 * len(members) + 8):
        found = None
        for step in range(1, 9):
            idx = (back + step) % 8
            dx, dy = _RING[idx]
            cand = (cur[0] + dx, cur[1] + dy)
            if cand in members:
                found = (cand, idx)
                break
        if found is None:
            break
        cand, idx = found
        prev_dx, prev_dy = _RING[(idx - 1) % 8]
        back_pixel = (cur[0] + prev_dx, cur[1] + prev_dy)
        cur = cand
        back = _RING.index((back_pixel[0] - cur[0], back_pixel[1] - cur[1]))
        if cur == start:
            break
        chain.append(cur)
    seen, ordered = set(), []
    for p in chain:
        if p not in seen:
            seen.add(p)
            ordered.append(p)
    return ordered


# =============================================================================
# Completion
# =============================================================================

def _bridge(a, b) -> list:
    rr, cc = line(a[1], a[0], b[1], b[0])
    return [(int(x), int(y)) for y, x in zip(rr, cc)][1:-1]


def _fill(pixels, shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    xs, ys = zip(*pixels)
    mask[np.asarray(ys), np.asarray(xs)] = True
    return ndimage.binary_fill_holes(mask)


def complete_contour(edges: np.ndarray, bridge_gap_max: float = 5.0) -> ContourSet:
    """Trace edge chains and close nearly-closed ones with straight virtual bridges.

    The closest pair of open ends within bridge_gap_max is bridged first,
    repeatedly; a chain bridged to itself becomes closed.
    """
    edges = np.asarray(edges, dtype=bool)
    if edges.ndim != 2:
        raise InvalidArgumentError(f"edge map must be 2-D, got {edges.shape}")
    shape = edges.shape
    components, n = ndimage.label(edges, structure=np.ones((3, 3)))
    endpoint_map = _endpoint_map(edges)

    closed, open_chains = [], []
    for comp in range(1, n + 1):
        mask = components == comp
        ys, xs = np.nonzero(mask)
        if len(xs) < MIN_CONTOUR_PIXELS:
            continue
        members = set(zip(xs.tolist(), ys.tolist()))
        if ndimage.binary_fill_holes(mask).sum() > mask.sum():
            closed.append((_trace_closed(members), [], ndimage.binary_fill_holes(mask)))
            continue
        eys, exs = np.nonzero(mask & endpoint_map)
        ends = sorted(zip(exs.tolist(), eys.tolist()), key=lambda p: (p[1], p[0]))
        if not ends:
            ends = [min(members, key=lambda p: (p[1], p[0]))]
        open_chains.append((_trace_open(members, ends), []))

    while open_chains:
        best = None
        for i, (ci, _) in enumerate(open_chains):
            for j in range(i, len(open_chains)):
                cj = open_chains[j][0]
                pairs = [(ci[0], ci[-1])] if i == j else [(a, b) for a in (ci[0], ci[-1]) for b in (cj[0], cj[-1])]
                for a, b in pairs:
                    dist = math.dist(a, b)
                    if dist > bridge_gap_max:
                        continue
                    if i == j and len(ci) < 4 * max(dist, 1.0):
                        continue  # too short to enclose anything
                    if best is None or dist < best[0]:
                        best = (dist, i, j, a, b)
        if best is None:
            break
        _, i, j, a, b = best
        chain_i, bridges_i = open_chains[i]
        if i == j:
            bridge = _bridge(chain_i[-1], chain_i[0])
            pixels = chain_i + bridge
            closed.append((pixels, bridges_i + bridge, _fill(pixels, shape)))
            open_chains.pop(i)
            continue
        chain_j, bridges_j = open_chains[j]
        if chain_i[-1] != a:
            chain_i = chain_i[::-1]
        if chain_j[0] != b:
            chain_j = chain_j[::-1]
        bridge = _bridge(a, b)
        merged = (chain_i + bridge + chain_j, bridges_i + bridge + bridges_j)
        open_chains = [c for k, c in enumerate(open_chains) if k not in (i, j)] + [merged]

    contours, flags, gaps, bridges, fills = [], [], [], [], []
    for pixels, bridge, fill in closed:
        contours.append(np.asarray(pixels, dtype=np.int64).reshape(-1, 2))
        flags.append(True)
        gaps.append(None)
        bridges.append(np.asarray(bridge, dtype=np.int64).reshape(-1, 2))
        fills.append(fill)
    for pixels, bridge in open_chains:
        contours.append(np.asarray(pixels, dtype=np.int64).reshape(-1, 2))
        flags.append(False)
        gaps.append((tuple(pixels[0]), tuple(pixels[-1])))
        bridges.append(np.asarray(bridge, dtype=np.int64).reshape(-1, 2))
        fills.append(None)
    logger.debug(f"contours: {flags.count(True)} closed, {flags.count(False)} open")
    return ContourSet(contours=tuple(contours), closed_flags=tuple(flags), gap_endpoints=tuple(gaps),
                      bridges=tuple(bridges), fills=tuple(fills), shape=shape)


# =============================================================================
# Closure loss
# =============================================================================

def rasterize_prior(weights: np.ndarray, graph: RegionGraph) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(graph),):
        raise InvalidArgumentError(f"expected {len(graph)} region weights, got {weights.shape}")
    return weights[graph.labels]


def binarize_prior(prior_map: np.ndarray, theta: float = 0.5) -> np.ndarray:
    prior_map = np.asarray(prior_map, dtype=np.float64)
    peak = prior_map.max(initial=0.0)
    if peak <= 0:
        return np.zeros(prior_map.shape, dtype=bool)
    return prior_map >= theta * peak


def closure_loss(prior_map: np.ndarray, object_mask: np.ndarray, theta: float = 0.5) -> float:
    """1 - IoU between the binarized prior map and the complete object mask."""
    prior_map = np.asarray(prior_map)
    object_mask = np.asarray(object_mask, dtype=bool)
    if prior_map.shape != object_mask.shape:
        raise InvalidArgumentError(f"prior map {prior_map.shape} vs mask {object_mask.shape}")
    pred = binarize_prior(prior_map, theta)
    union = int((pred | object_mask).sum())
    if union == 0:
        return 0.0
    return 1.0 - int((pred & object_mask).sum()) / union


def soft_closure_loss(pixel_map: Tensor, object_mask: np.ndarray) -> Tensor:
    """Differentiable surrogate: 1 - sum(min) / sum(max) over soft values."""
    target = Tensor(np.asarray(object_mask, dtype=np.float64).reshape(pixel_map.shape))
    top = nt.sum(nt.maximum(pixel_map, target))
    if top.item() == 0.0:
        return Tensor(0.0)
    return 1.0 - nt.sum(nt.minimum(pixel_map, target)) / top


def soft_prior_map(prior: Tensor, graph: RegionGraph) -> Tensor:
    """Prior rasterized onto pixels and scaled so its peak is 1."""
    pixels = nt.take(prior, graph.labels.ravel())
    return pixels / nt.amax(pixels)


def fill_for_query(contours: ContourSet, point: tuple) -> Optional[np.ndarray]:
    """Union of the closed fills that contain point, or None."""
    x, y = int(round(point[0])), int(round(point[1]))
    hits = [f for f in contours.fills if f is not None and f[y, x]]
    if not hits:
        return None
    return np.logical_or.reduce(hits)

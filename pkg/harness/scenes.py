"""Synthetic spatial scenes, templated questions and the geometry oracle."""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from skimage.draw import disk, line, polygon

from causal_text.lexicon import Vocabulary
from numeric.errors import GenerationFailure, InvalidArgumentError, NotFoundError, OracleMismatchError
from regions.graph import Image

from .config import FAMILIES, DataConfig

logger = logging.getLogger("gestalt.harness")

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.75, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.85, 0.1),
    "purple": (0.6, 0.2, 0.8),
    "orange": (1.0, 0.55, 0.0),
}
SHAPES = ("square", "circle", "triangle")
ROWS = ("top", "middle", "bottom")
COLUMNS = ("left", "center", "right")
BACKGROUND = (0.05, 0.05, 0.05)
PATH_COLOR = (0.5, 0.5, 0.5)
OUTLINE = 2
MAX_ATTEMPTS = 20

MIN_OBJECTS = {"locate": 1, "relation": 2, "containment": 2, "occlusion": 2, "path": 3, "causal_why": 2}

TEMPLATES = {
    "locate": {"where": "where is the {a}?"},
    "relation": {
        "left_of": "what is left of the {b}?",
        "right_of": "what is right of the {b}?",
        "above": "what is above the {b}?",
        "below": "what is below the {b}?",
    },
    "containment": {"inside": "what is inside the {b}?", "holds": "what holds the {a}?"},
    "occlusion": {"front": "what is in front of the {b}?", "hides": "which object hides part of the {b}?"},
    "path": {"next": "going along the path from the {a}, what comes next?",
             "follows": "what follows the {a} through the path?"},
    "causal_why": {"why": "why is the {b} partly hidden?", "causes": "what causes the {b} to look broken?"},
}


# =============================================================================
# Domain Types
# =============================================================================

@dataclass(frozen=True, eq=False)
class SceneObject:
    shape: str
    color: str
    position: tuple  # (x0, y0) top-left of the bounding square
    size: int
    full_mask: np.ndarray
    visible_mask: np.ndarray
    container: bool = False

    @property
    def name(self) -> str:
        return f"{self.color} {self.shape}"

    @property
    def bbox(self) -> tuple:
        """(x0, y0, x1, y1) inclusive bounds of the full mask."""
        ys, xs = np.nonzero(self.full_mask)
        return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())

    @property
    def centroid(self) -> tuple:
        ys, xs = np.nonzero(self.full_mask)
        return float(xs.mean()), float(ys.mean())

    @property
    def own_mask(self) -> np.ndarray:
        """Pixels the object paints when nothing covers it."""
        return _outline(self.full_mask, *self.position, self.size) if self.container else self.full_mask


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    canvas: Image
    objects: tuple
    relations: tuple  # sorted (relation, i, j)
    family: str
    seed: int
    path: Optional[tuple] = None  # ordered (x, y) waypoints

    def __post_init__(self):
        h, w = self.canvas.height, self.canvas.width
        for obj in self.objects:
            if obj.full_mask.shape != (h, w) or (obj.visible_mask & ~obj.full_mask).any():
                raise InvalidArgumentError(f"{obj.name}: masks must fit the canvas and visible <= full")

    def index_of(self, name: str) -> int:
        for i, obj in enumerate(self.objects):
            if obj.name == name:
                return i
        raise NotFoundError(f"no {name} in scene {self.seed}")


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: str
    family: str
    provenance: dict = field(default_factory=dict, compare=False)

    @property
    def answer_tokens(self) -> list:
        return self.answer.split()


@dataclass(frozen=True)
class SceneSpec:
    families: tuple = FAMILIES
    canvas: int = 64
    min_objects: int = 2
    max_objects: int = 4
    occlusion_fraction: Optional[float] = None
    inner_size: Optional[int] = None
    outer_size: Optional[int] = None

    def __post_init__(self):
        if self.canvas < 32:
            raise InvalidArgumentError(f"canvas must be at least 32x32, got {self.canvas}")
        if not set(self.families) <= set(FAMILIES) or not self.families:
            raise InvalidArgumentError(f"families must be a non-empty subset of {list(FAMILIES)}")
        if self.occlusion_fraction is not None and not 0 < self.occlusion_fraction < 1:
            raise InvalidArgumentError("occlusion_fraction must lie in (0, 1)")

    @classmethod
    def from_config(cls, data: DataConfig) -> "SceneSpec":
        return cls(families=tuple(data.families), canvas=data.canvas, min_objects=data.min_objects,
                   max_objects=data.max_objects)


@dataclass(frozen=True, eq=False)
class Sample:
    seed: int
    scene: SyntheticScene
    qa: QAPair


# =============================================================================
# Rasterization
# =============================================================================

def _shape_mask(shape: str, x0: int, y0: int, size: int, canvas: int) -> np.ndarray:
    mask = np.zeros((canvas, canvas), dtype=bool)
    if shape == "square":
        mask[y0:y0 + size, x0:x0 + size] = True
    elif shape == "circle":
        c = (size - 1) / 2
        rr, cc = disk((y0 + c, x0 + c), size / 2, shape=mask.shape)
        mask[rr, cc] = True
    elif shape == "triangle":
        rr, cc = polygon([y0 + size - 1, y0 + size - 1, y0], [x0, x0 + size - 1, x0 + (size - 1) / 2],
                         shape=mask.shape)
        mask[rr, cc] = True
    else:
        raise InvalidArgumentError(f"unknown shape {shape!r}")
    return mask


def _outline(full: np.ndarray, x0: int, y0: int, size: int) -> np.ndarray:
    inner = np.zeros_like(full)
    inner[y0 + OUTLINE:y0 + size - OUTLINE, x0 + OUTLINE:x0 + size - OUTLINE] = True
    return full & ~inner


def _render(canvas: int, objects: Sequence[SceneObject], path: Optional[Sequence]) -> Image:
    data = np.empty((canvas, canvas, 3))
    data[:] = BACKGROUND
    if path:
        for (xa, ya), (xb, yb) in zip(path[:-1], path[1:]):
            rr, cc = line(int(round(ya)), int(round(xa)), int(round(yb)), int(round(xb)))
            data[rr, cc] = PATH_COLOR
    for obj in objects:
        data[obj.visible_mask] = COLORS[obj.color]
    return Image.from_array(data)


# =============================================================================
# Geometry oracle
# =============================================================================

def _path_order(objects: Sequence[SceneObject], path: Optional[Sequence]) -> list:
    order = []
    for x, y in path or ():
        hits = [i for i, o in enumerate(objects) if o.full_mask[int(round(y)), int(round(x))]]
        if hits:
            order.append(hits[-1])
    return order


def geometry_relations(objects: Sequence[SceneObject], path: Optional[Sequence] = None) -> tuple:
    """Every spatial relation recomputed from the masks alone."""
    rels = []
    boxes = [o.bbox for o in objects]
    for i, a in enumerate(objects):
        for j, b in enumerate(objects):
            if i == j:
                continue
            ax0, ay0, ax1, ay1 = boxes[i]
            bx0, by0, bx1, by1 = boxes[j]
            if ax1 < bx0:
                rels.append(("left_of", i, j))
            if ax0 > bx1:
                rels.append(("right_of", i, j))
            if ay1 < by0:
                rels.append(("above", i, j))
            if ay0 > by1:
                rels.append(("below", i, j))
            if b.container and not (a.full_mask & ~b.full_mask).any() and not (a.full_mask & b.visible_mask).any():
                rels.append(("inside", i, j))
            if i > j and not a.container and (a.full_mask & b.own_mask).any():
                rels.append(("occludes", i, j))
    order = _path_order(objects, path)
    rels.extend(("along_path", a, b) for a, b in zip(order[:-1], order[1:]))
    return tuple(sorted(rels))


def grid_cell(obj: SceneObject, canvas: int) -> str:
    cx, cy = obj.centroid
    col = COLUMNS[min(2, int(3 * (cx + 0.5) / canvas))]
    row = ROWS[min(2, int(3 * (cy + 0.5) / canvas))]
    return f"{row} {col}"


def _unique(rels, relation: str, *, first=None, second=None) -> Optional[int]:
    """The single partner in relation with the fixed side, or None."""
    if first is not None:
        hits = [j for r, i, j in rels if r == relation and i == first]
    else:
        hits = [i for r, i, j in rels if r == relation and j == second]
    return hits[0] if len(hits) == 1 else None


def _candidates(scene: SyntheticScene, family: str, rels) -> list:
    """(template id, anchor index, answer) for every answerable question."""
    objs = scene.objects
    out = []
    for k, obj in enumerate(objs):
        if family == "locate":
            out.append(("where", k, grid_cell(obj, scene.canvas.width)))
        elif family == "relation":
            for relation in ("left_of", "right_of", "above", "below"):
                a = _unique(rels, relation, second=k)
                if a is not None:
                    out.append((relation, k, objs[a].name))
        elif family == "containment":
            a = _unique(rels, "inside", second=k)
            if a is not None:
                out.append(("inside", k, objs[a].name))
            b = _unique(rels, "inside", first=k)
            if b is not None:
                out.append(("holds", k, objs[b].name))
        elif family in ("occlusion", "causal_why"):
            a = _unique(rels, "occludes", second=k)
            if a is not None:
                for template in TEMPLATES[family]:
                    out.append((template, k, objs[a].name))
        elif family == "path":
            b = _unique(rels, "along_path", first=k)
            if b is not None:
                for template in TEMPLATES["path"]:
                    out.append((template, k, objs[b].name))
    return out


def answer_question(scene: SyntheticScene, family: str, template: str, anchor: int) -> str:
    """Recompute an answer from geometry alone."""
    rels = geometry_relations(scene.objects, scene.path)
    for t, k, answer in _candidates(scene, family, rels):
        if t == template and k == anchor:
            return answer
    raise NotFoundError(f"{family}/{template} has no unique answer for object {anchor}")


def check_oracle(scene: SyntheticScene, qa: QAPair):
    expected = answer_question(scene, qa.family, qa.provenance["template"], qa.provenance["anchor"])
    if expected != qa.answer:
        raise OracleMismatchError(f"scene {scene.seed}: {qa.question!r} answered {qa.answer!r}, "
                                  f"geometry says {expected!r}")


def mirror_scene(scene: SyntheticScene) -> SyntheticScene:
    """Horizontal flip; left/right relations swap."""
    w = scene.canvas.width
    objects = tuple(replace(o, position=(w - o.position[0] - o.size, o.position[1]),
                            full_mask=np.fliplr(o.full_mask).copy(),
                            visible_mask=np.fliplr(o.visible_mask).copy()) for o in scene.objects)
    path = None if scene.path is None else tuple((w - 1 - x, y) for x, y in scene.path)
    canvas = Image.from_array(scene.canvas.data[:, ::-1, :])
    return replace(scene, canvas=canvas, objects=objects, path=path,
                   relations=geometry_relations(objects, path))


# =============================================================================
# Scene generation
# =============================================================================

def _overlaps(box, boxes, margin: int) -> bool:
    x0, y0, x1, y1 = box
    return any(x0 <= bx1 + margin and bx0 <= x1 + margin and y0 <= by1 + margin and by0 <= y1 + margin
               for bx0, by0, bx1, by1 in boxes)


def _place(rng, size: int, boxes: list, canvas: int, margin: int = 2, tries: int = 200):
    if canvas - size < 2:
        raise GenerationFailure(f"a {size} px object does not fit a {canvas} px canvas with its border")
    for _ in range(tries):
        x0 = int(rng.integers(1, canvas - size))
        y0 = int(rng.integers(1, canvas - size))
        box = (x0, y0, x0 + size - 1, y0 + size - 1)
        if not _overlaps(box, boxes, margin):
            return x0, y0
    return None


def _names(rng, count: int) -> list:
    """count distinct (color, shape) pairs with distinct colors."""
    colors = rng.permutation(list(COLORS))[:count]
    return [(str(c), SHAPES[int(rng.integers(len(SHAPES)))]) for c in colors]


def _make(shape, color, x0, y0, size, canvas, container=False) -> SceneObject:
    full = _shape_mask(shape, x0, y0, size, canvas)
    return SceneObject(shape=shape, color=color, position=(x0, y0), size=size, full_mask=full,
                       visible_mask=full, container=container)


def _occluded_side(fraction: float) -> tuple[int, int]:
    """Square side and covered column count whose ratio best matches fraction."""
    best = min(range(10, 21), key=lambda s: (abs(round(fraction * s) / s - fraction), s))
    return best, max(1, round(fraction * best))


def _layout(rng, family: str, spec: SceneSpec, count: int) -> tuple[list, Optional[tuple]]:
    canvas = spec.canvas
    names = _names(rng, count)
    objects, boxes, path = [], [], None

    if family == "containment":
        outer = spec.outer_size or int(rng.integers(22, 31))
        inner = spec.inner_size or int(rng.integers(6, 11))
        if inner + 2 * (OUTLINE + 2) > outer:
            return None, None
        spot = _place(rng, outer, boxes, canvas)
        if spot is None:
            return None, None
        X0, Y0 = spot
        (bc, _), (ac, ashape) = names[0], names[1]
        lo, hi = OUTLINE + 2, outer - OUTLINE - 2 - inner
        ix, iy = X0 + int(rng.integers(lo, hi + 1)), Y0 + int(rng.integers(lo, hi + 1))
        objects += [_make("square", bc, X0, Y0, outer, canvas, container=True),
                    _make(ashape, ac, ix, iy, inner, canvas)]
        boxes.append((X0, Y0, X0 + outer - 1, Y0 + outer - 1))
        names = names[2:]
    elif family in ("occlusion", "causal_why"):
        fraction = spec.occlusion_fraction or float(rng.uniform(0.2, 0.5))
        side, covered = _occluded_side(fraction)
        occluder = side + 2
        spot = _place(rng, side + 4, boxes, canvas)
        if spot is None:
            return None, None
        bx, by = spot[0] + 1, spot[1] + 2
        (bc, _), (ac, _) = names[0], names[1]
        ax, ay = bx + side - covered, by - 1
        if ax + occluder > canvas - 1:
            return None, None
        objects += [_make("square", bc, bx, by, side, canvas), _make("square", ac, ax, ay, occluder, canvas)]
        boxes.append((bx, ay, ax + occluder - 1, ay + occluder - 1))
        names = names[2:]
    elif family == "path":
        waypoints = []
        for color, shape in names[:3]:
            size = int(rng.integers(8, 13))
            spot = _place(rng, size, boxes, canvas, margin=6)
            if spot is None:
                return None, None
            objects.append(_make(shape, color, spot[0], spot[1], size, canvas))
            boxes.append((spot[0], spot[1], spot[0] + size - 1, spot[1] + size - 1))
            waypoints.append((spot[0] + (size - 1) / 2, spot[1] + (size - 1) / 2))
        path = tuple(waypoints)
        names = []

    for color, shape in names:
        size = int(rng.integers(8, 15))
        spot = _place(rng, size, boxes, canvas)
        if spot is None:
            return None, None
        objects.insert(0, _make(shape, color, spot[0], spot[1], size, canvas))
        boxes.append((spot[0], spot[1], spot[0] + size - 1, spot[1] + size - 1))
    return objects, path


def _visibility(objects: list) -> list:
    out = []
    for i, obj in enumerate(objects):
        visible = obj.own_mask.copy()
        for later in objects[i + 1:]:
            visible &= ~later.full_mask
        out.append(replace(obj, visible_mask=visible))
    return out


def generate_scene(seed: int, spec: SceneSpec = SceneSpec(), family: Optional[str] = None) -> SyntheticScene:
    """Deterministic scene holding at least one relation of its family."""
    rng = np.random.default_rng(seed)
    if family is None:
        family = spec.families[int(rng.integers(len(spec.families)))]
    elif family not in FAMILIES:
        raise InvalidArgumentError(f"unknown family {family!r}")
    need = MIN_OBJECTS[family]
    if spec.max_objects < need:
        raise GenerationFailure(f"{family} needs {need} objects, spec allows {spec.max_objects}")
    for attempt in range(MAX_ATTEMPTS):
        count = int(rng.integers(max(spec.min_objects, need), spec.max_objects + 1))
        if family == "path":
            count = 3
        objects, path = _layout(rng, family, spec, count)
        if objects is None:
            continue
        objects = _visibility(objects)
        scene = SyntheticScene(canvas=_render(spec.canvas, objects, path), objects=tuple(objects),
                               relations=geometry_relations(objects, path), family=family, seed=seed,
                               path=path)
        if _candidates(scene, family, scene.relations):
            return scene
    raise GenerationFailure(f"seed {seed}: no {family} scene after {MAX_ATTEMPTS} attempts")


def generate_question(scene: SyntheticScene, family: str, seed: int) -> QAPair:
    candidates = _candidates(scene, family, scene.relations)
    if not candidates:
        raise NotFoundError(f"scene {scene.seed} has no {family} relation")
    rng = np.random.default_rng(seed)
    template, anchor, answer = candidates[int(rng.integers(len(candidates)))]
    obj = scene.objects[anchor]
    text = TEMPLATES[family][template].format(a=obj.name, b=obj.name)
    return QAPair(question=text, answer=answer, family=family,
                  provenance={"template": template, "anchor": anchor, "scene": scene.seed})


# =============================================================================
# Datasets and vocabularies
# =============================================================================

def generate_sample(seed: int, spec: SceneSpec) -> Sample:
    scene = generate_scene(seed, spec)
    return Sample(seed=seed, scene=scene, qa=generate_question(scene, scene.family, seed))


def build_dataset(spec: SceneSpec, seeds: Sequence[int], workers: int = 1) -> list:
    """One sample per seed, merged in seed order whatever the worker count.

    Every answer is re-derived from the scene geometry; a disagreement raises
    OracleMismatchError.
    """
    seeds = list(seeds)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(generate_sample, seeds, [spec] * len(seeds), chunksize=16))
    else:
        samples = [generate_sample(s, spec) for s in seeds]
    for sample in samples:
        check_oracle(sample.scene, sample.qa)
    logger.info(f"generated {len(samples)} samples from seeds {seeds[0] if seeds else '-'}..")
    return samples


def split_seeds(seed: int, n_train: int, n_eval: int) -> tuple[range, range]:
    """Disjoint, contiguous scene-seed ranges for training and evaluation."""
    base = 1_000_003 * seed
    return range(base, base + n_train), range(base + n_train, base + n_train + n_eval)


def answer_vocabulary() -> list:
    return ["<eos>", *COLORS, *SHAPES, *ROWS, *COLUMNS]


def question_vocabulary() -> Vocabulary:
    texts = [t for family in TEMPLATES.values() for t in family.values()]
    return Vocabulary.build(texts + [" ".join(COLORS), " ".join(SHAPES)])

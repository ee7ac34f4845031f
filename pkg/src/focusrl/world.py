"""Procedural micro-world of grid scenes plus attribute questions.

A scene places a handful of colored shapes on a coarse cell grid with
pairwise-disjoint, cell-aligned bounding boxes.  A task asks for one
attribute (shape or color) of a uniquely identified target object; the
selector never mentions the asked attribute, so answering requires locating
the target.  Scenes encode to a flat per-cell feature vector and crop by
zeroing every cell whose center falls outside a box.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingInput, NoUnambiguousQuery, PlacementFailure
from .geometry import BoundingBox

SHAPE_NAMES = ("circle", "square", "triangle", "star", "hexagon", "cross")
COLOR_NAMES = ("red", "green", "blue", "yellow", "purple", "orange", "cyan", "magenta")

SELECTOR_KINDS = ("shape", "color", "position")
ASKABLE_ATTRIBUTES = ("shape", "color")

_POOL_SALT = 11
_POOL_RETRIES = 16


@dataclass(frozen=True)
class WorldConfig:
    grid_size: int = 8
    n_shapes: int = 4
    n_colors: int = 6
    min_objects: int = 2
    max_objects: int = 5
    max_object_span: int = 2
    min_box_area: float = 1e-4
    placement_attempts: int = 100

    def __post_init__(self):
        if self.grid_size < 2:
            raise ValueError("grid_size must be at least 2")
        if not 1 <= self.n_shapes <= len(SHAPE_NAMES):
            raise ValueError(f"n_shapes must be in [1, {len(SHAPE_NAMES)}]")
        if not 1 <= self.n_colors <= len(COLOR_NAMES):
            raise ValueError(f"n_colors must be in [1, {len(COLOR_NAMES)}]")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 1 <= self.max_object_span <= self.grid_size:
            raise ValueError("max_object_span must be in [1, grid_size]")
        if self.min_box_area <= 0.0:
            raise ValueError("min_box_area must be positive")
        if self.placement_attempts < 1:
            raise ValueError("placement_attempts must be positive")

    @property
    def shapes(self) -> tuple:
        return SHAPE_NAMES[: self.n_shapes]

    @property
    def colors(self) -> tuple:
        return COLOR_NAMES[: self.n_colors]

    @property
    def vocab(self) -> tuple:
        """Answer vocabulary: shape names then color names."""
        return self.shapes + self.colors

    @property
    def cells(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def cell_block(self) -> int:
        """Per-cell feature block: shape one-hot, color one-hot, occupancy."""
        return self.n_shapes + self.n_colors + 1

    @property
    def feature_dim(self) -> int:
        return self.cells * self.cell_block

    @property
    def query_dim(self) -> int:
        # selector kind + shape value + color value + cell (column, row) + asked attribute
        return len(SELECTOR_KINDS) + self.n_shapes + self.n_colors + 2 * self.grid_size + len(ASKABLE_ATTRIBUTES)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    bbox: BoundingBox


@dataclass(frozen=True)
class Scene:
    id: int
    grid_size: int
    objects: tuple


@dataclass(frozen=True, eq=False)
class QueryInstance:
    task_id: int
    scene_id: int
    selector_kind: str
    selector_value: object
    asked_attribute: str
    gt_answer: str
    gt_region: BoundingBox
    query_embedding: np.ndarray


@dataclass
class TaskPool:
    """A named split: scenes keyed by id plus one task per scene."""

    label: str
    cfg: WorldConfig
    scenes: dict = field(default_factory=dict)
    tasks: list = field(default_factory=list)

    def scene_for(self, task: QueryInstance) -> Scene:
        return self.scenes[task.scene_id]


def _cell_span(obj: SceneObject, grid_size: int) -> tuple:
    """Integer cell rectangle (ix0, iy0, ix1, iy1) of a cell-aligned box."""
    b = obj.bbox
    return (
        int(round(b.x_lo * grid_size)),
        int(round(b.y_lo * grid_size)),
        int(round(b.x_hi * grid_size)),
        int(round(b.y_hi * grid_size)),
    )


def generate_scene(cfg: WorldConfig, rng: np.random.Generator, scene_id: int = 0) -> Scene:
    """Place 2..max_objects shapes with disjoint cell-aligned boxes.

    Raises PlacementFailure when an object cannot be placed within the
    attempt budget, or immediately when more objects are requested than
    grid cells exist.
    """
    grid = cfg.grid_size
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    if n > cfg.cells:
        raise PlacementFailure(f"cannot place {n} objects on a {grid}x{grid} grid")
    occupied = np.zeros((grid, grid), dtype=bool)
    objects = []
    for i in range(n):
        placed = False
        for _ in range(cfg.placement_attempts):
            w = int(rng.integers(1, cfg.max_object_span + 1))
            h = int(rng.integers(1, cfg.max_object_span + 1))
            ix = int(rng.integers(0, grid - w + 1))
            iy = int(rng.integers(0, grid - h + 1))
            if occupied[iy : iy + h, ix : ix + w].any():
                continue
            occupied[iy : iy + h, ix : ix + w] = True
            shape = cfg.shapes[int(rng.integers(0, cfg.n_shapes))]
            color = cfg.colors[int(rng.integers(0, cfg.n_colors))]
            bbox = BoundingBox(ix / grid, iy / grid, (ix + w) / grid, (iy + h) / grid)
            objects.append(SceneObject(shape, color, bbox))
            placed = True
            break
        if not placed:
            raise PlacementFailure(
                f"failed to place object {i + 1} of {n} "
                f"after {cfg.placement_attempts} attempts"
            )
    return Scene(scene_id, grid, tuple(objects))


def query_embedding(
    cfg: WorldConfig, selector_kind: str, selector_value, asked_attribute: str
) -> np.ndarray:
    """Fixed-layout one-hot encoding of a question."""
    vec = np.zeros(cfg.query_dim)
    vec[SELECTOR_KINDS.index(selector_kind)] = 1.0
    off = len(SELECTOR_KINDS)
    if selector_kind == "shape":
        vec[off + cfg.shapes.index(selector_value)] = 1.0
    off += cfg.n_shapes
    if selector_kind == "color":
        vec[off + cfg.colors.index(selector_value)] = 1.0
    off += cfg.n_colors
    if selector_kind == "position":
        ix, iy = selector_value
        vec[off + ix] = 1.0
        vec[off + cfg.grid_size + iy] = 1.0
    off += 2 * cfg.grid_size
    vec[off + ASKABLE_ATTRIBUTES.index(asked_attribute)] = 1.0
    return vec


def make_task(
    scene: Scene,
    cfg: WorldConfig,
    rng: np.random.Generator,
    selector_kinds: tuple = SELECTOR_KINDS,
) -> QueryInstance:
    """Build a question whose selector matches exactly one object.

    Shape and color selectors qualify only when the value is unique in the
    scene; a position selector names any covered cell and always qualifies.
    Raises NoUnambiguousQuery when the allowed kinds admit no candidate.
    """
    candidates = {}
    by_shape = {}
    by_color = {}
    for idx, obj in enumerate(scene.objects):
        by_shape.setdefault(obj.shape, []).append(idx)
        by_color.setdefault(obj.color, []).append(idx)
    if "shape" in selector_kinds:
        unique = [(s, idxs[0]) for s, idxs in sorted(by_shape.items()) if len(idxs) == 1]
        if unique:
            candidates["shape"] = unique
    if "color" in selector_kinds:
        unique = [(c, idxs[0]) for c, idxs in sorted(by_color.items()) if len(idxs) == 1]
        if unique:
            candidates["color"] = unique
    if "position" in selector_kinds:
        cells = []
        for idx, obj in enumerate(scene.objects):
            ix0, iy0, ix1, iy1 = _cell_span(obj, scene.grid_size)
            for iy in range(iy0, iy1):
                for ix in range(ix0, ix1):
                    cells.append(((ix, iy), idx))
        if cells:
            candidates["position"] = cells
    if not candidates:
        raise NoUnambiguousQuery(f"scene {scene.id} admits no unambiguous selector")
    kinds = [k for k in selector_kinds if k in candidates]
    kind = kinds[int(rng.integers(0, len(kinds)))]
    value, target_idx = candidates[kind][int(rng.integers(0, len(candidates[kind])))]
    if kind == "position":
        asked = ASKABLE_ATTRIBUTES[int(rng.integers(0, len(ASKABLE_ATTRIBUTES)))]
    else:
        # ask for the attribute the selector did not use
        asked = "color" if kind == "shape" else "shape"
    target = scene.objects[target_idx]
    return QueryInstance(
        task_id=scene.id,
        scene_id=scene.id,
        selector_kind=kind,
        selector_value=value,
        asked_attribute=asked,
        gt_answer=getattr(target, asked),
        gt_region=target.bbox,
        query_embedding=query_embedding(cfg, kind, value, asked),
    )


def encode_features(scene: Scene, cfg: WorldConfig) -> np.ndarray:
    """Flat float64 scene encoding, cell-major, one block per cell."""
    feats = np.zeros(cfg.feature_dim)
    block = cfg.cell_block
    for obj in scene.objects:
        si = cfg.shapes.index(obj.shape)
        ci = cfg.colors.index(obj.color)
        ix0, iy0, ix1, iy1 = _cell_span(obj, scene.grid_size)
        for iy in range(iy0, iy1):
            for ix in range(ix0, ix1):
                base = (iy * scene.grid_size + ix) * block
                feats[base + si] = 1.0
                feats[base + cfg.n_shapes + ci] = 1.0
                feats[base + cfg.n_shapes + cfg.n_colors] = 1.0
    return feats


def cell_mask(cfg: WorldConfig, box: BoundingBox) -> np.ndarray:
    """Boolean mask over cells whose centers fall inside ``box`` (closed)."""
    grid = cfg.grid_size
    centers = (np.arange(grid) + 0.5) / grid
    in_x = (centers >= box.x_lo) & (centers <= box.x_hi)
    in_y = (centers >= box.y_lo) & (centers <= box.y_hi)
    return (in_y[:, None] & in_x[None, :]).reshape(-1)


def crop_features(scene: Scene, box: BoundingBox, cfg: WorldConfig) -> np.ndarray:
    """Scene encoding with every cell outside ``box`` zeroed, occupancy included."""
    feats = encode_features(scene, cfg)
    return feats * np.repeat(cell_mask(cfg, box), cfg.cell_block)


class FeatureCache:
    """Memoizes per-scene encodings; crops reuse the cached vector."""

    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg
        self._feats = {}

    def features(self, scene: Scene) -> np.ndarray:
        got = self._feats.get(scene.id)
        if got is None:
            got = encode_features(scene, self.cfg)
            got.setflags(write=False)
            self._feats[scene.id] = got
        return got

    def crop(self, scene: Scene, box: BoundingBox) -> np.ndarray:
        return self.features(scene) * np.repeat(cell_mask(self.cfg, box), self.cfg.cell_block)


def generate_pool(
    cfg: WorldConfig, label: str, start_id: int, count: int, master_seed: int
) -> TaskPool:
    """Deterministically build ``count`` scene/task pairs with ids starting
    at ``start_id``.  Each id gets its own seed stream, so pools with
    non-overlapping id ranges never share randomness."""
    pool = TaskPool(label=label, cfg=cfg)
    for sid in range(start_id, start_id + count):
        built = None
        for retry in range(_POOL_RETRIES):
            rng = np.random.default_rng(
                np.random.SeedSequence((master_seed, _POOL_SALT, sid, retry))
            )
            try:
                scene = generate_scene(cfg, rng, scene_id=sid)
                task = make_task(scene, cfg, rng)
            except (PlacementFailure, NoUnambiguousQuery):
                continue
            built = (scene, task)
            break
        if built is None:
            raise PlacementFailure(f"could not build a task for id {sid}")
        pool.scenes[sid] = built[0]
        pool.tasks.append(built[1])
    return pool


def task_record(scene: Scene, task: QueryInstance) -> dict:
    """JSONL record for one scene/task pair."""
    value = task.selector_value
    if task.selector_kind == "position":
        value = list(value)
    return {
        "id": scene.id,
        "objects": [
            {"shape": o.shape, "color": o.color, "bbox": o.bbox.as_list()}
            for o in scene.objects
        ],
        "question": {
            "selector": {"kind": task.selector_kind, "value": value},
            "attribute": task.asked_attribute,
        },
        "gt_answer": task.gt_answer,
        "gt_region": task.gt_region.as_list(),
    }


def load_task_record(rec: dict, cfg: WorldConfig) -> tuple:
    """Rebuild (Scene, QueryInstance) from a JSONL record."""
    try:
        sid = int(rec["id"])
        objects = tuple(
            SceneObject(o["shape"], o["color"], BoundingBox.from_list(o["bbox"]))
            for o in rec["objects"]
        )
        kind = rec["question"]["selector"]["kind"]
        value = rec["question"]["selector"]["value"]
        if kind == "position":
            value = tuple(int(v) for v in value)
        asked = rec["question"]["attribute"]
        answer = rec["gt_answer"]
        region = BoundingBox.from_list(rec["gt_region"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MissingInput(f"malformed task record: {json.dumps(rec)[:200]}") from exc
    scene = Scene(sid, cfg.grid_size, objects)
    task = QueryInstance(
        task_id=sid,
        scene_id=sid,
        selector_kind=kind,
        selector_value=value,
        asked_attribute=asked,
        gt_answer=answer,
        gt_region=region,
        query_embedding=query_embedding(cfg, kind, value, asked),
    )
    return scene, task


def pool_from_records(label: str, cfg: WorldConfig, records) -> TaskPool:
    pool = TaskPool(label=label, cfg=cfg)
    for rec in records:
        scene, task = load_task_record(rec, cfg)
        pool.scenes[scene.id] = scene
        pool.tasks.append(task)
    return pool

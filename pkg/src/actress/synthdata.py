"""Procedural grounding scenes with discriminative referring expressions.

A scene is a ``G x G`` grid holding a few non-overlapping rectangular objects,
each with a shape and a color. A query is a short token sequence that refers
to exactly one object. Three expression families are produced:

* attribute:   ``the red circle``, ``the star``, ``the blue one``
* relational:  ``the circle left of the red square``
* superlative: ``the largest square``

Datasets serialize to JSON lines, one sample per line::

    {"gold": [cx, cy, w, h] | null, "grid": 8, "id": 0,
     "objects": [[shape, color, col, row, w, h], ...],
     "pseudo": false, "target": 2 | null, "tokens": [1, 9, 4]}

``objects`` entries are integer cell coordinates (column, row of the top-left
cell, width and height in cells); ``shape``/``color`` index ``SHAPES`` and
``COLORS``. ``gold`` and ``target`` are null for unlabeled samples.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SHAPES = ("circle", "square", "triangle", "star", "diamond")
COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
SHAPE_SYNONYMS = {
    "circle": ("circle", "ball"),
    "square": ("square", "box"),
    "triangle": ("triangle", "wedge"),
    "star": ("star",),
    "diamond": ("diamond", "rhombus"),
}
RELATIONS = ("left", "right", "above", "below")
SUPERLATIVES = {"largest": "max", "biggest": "max", "smallest": "min", "tiniest": "min"}

VOCAB: tuple[str, ...] = (
    "<pad>", "the", "of", "one", "thing", "object",
    *sorted({w for syn in SHAPE_SYNONYMS.values() for w in syn}),
    *COLORS,
    *RELATIONS,
    *SUPERLATIVES,
)
TOKEN = {w: i for i, w in enumerate(VOCAB)}
PAD = TOKEN["<pad>"]
WORD_TO_SHAPE = {w: SHAPES.index(s) for s, syn in SHAPE_SYNONYMS.items() for w in syn}
N_FEATURES = len(SHAPES) + len(COLORS) + 2
N_ATTRIBUTES = len(SHAPES) + len(COLORS)
# token id naming each one-hot attribute channel of the feature grid
ATTRIBUTE_TOKENS = tuple(TOKEN[w] for w in SHAPES + COLORS)
T_MAX = 12
MAX_SCENE_RETRIES = 1000


class GenerationError(RuntimeError):
    """Raised when rejection sampling cannot produce a valid sample."""


@dataclass(frozen=True)
class SceneObject:
    shape: int
    color: int
    col: int
    row: int
    w: int
    h: int

    def corners(self, grid_size: int) -> np.ndarray:
        g = float(grid_size)
        return np.array([self.col / g, self.row / g, (self.col + self.w) / g, (self.row + self.h) / g])

    def center_box(self, grid_size: int) -> np.ndarray:
        g = float(grid_size)
        return np.array(
            [(self.col + self.w / 2) / g, (self.row + self.h / 2) / g, self.w / g, self.h / g]
        )

    @property
    def area(self) -> int:
        return self.w * self.h


@dataclass(frozen=True, eq=False)
class Scene:
    grid_size: int
    objects: tuple[SceneObject, ...]

    @cached_property
    def feature_grid(self) -> np.ndarray:
        """``G x G x F`` array: one-hot shape, one-hot color, (x, y) of the cell center."""
        g = self.grid_size
        grid = np.zeros((g, g, N_FEATURES))
        for ob in self.objects:
            cells = grid[ob.row : ob.row + ob.h, ob.col : ob.col + ob.w]
            cells[..., ob.shape] = 1.0
            cells[..., len(SHAPES) + ob.color] = 1.0
        centers = (np.arange(g) + 0.5) / g
        grid[..., -2] = centers[None, :]
        grid[..., -1] = centers[:, None]
        return grid


@dataclass(frozen=True)
class Query:
    tokens: tuple[int, ...]
    target_index: int | None = None

    @property
    def words(self) -> list[str]:
        return [VOCAB[t] for t in self.tokens]


@dataclass(frozen=True, eq=False)
class Sample:
    """A (scene, query) pair. ``gold`` holds the training target box, if any.

    For pseudo-labeled samples ``gold`` is the model-proposed box and
    ``pseudo`` is set.
    """

    id: int
    scene: Scene
    query: Query
    gold: np.ndarray | None = None
    pseudo: bool = False

    @property
    def labeled(self) -> bool:
        return self.gold is not None


# ---------------------------------------------------------------- predicates


def _parse_descriptor(words: Sequence[str]) -> tuple[int | None, int | None]:
    shape = color = None
    for w in words:
        if w in WORD_TO_SHAPE:
            shape = WORD_TO_SHAPE[w]
        elif w in COLORS:
            color = COLORS.index(w)
    return shape, color


def _desc_match(ob: SceneObject, shape: int | None, color: int | None) -> bool:
    return (shape is None or ob.shape == shape) and (color is None or ob.color == color)


def _related(t: SceneObject, o: SceneObject, rel: str) -> bool:
    if rel == "left":
        return t.col + t.w <= o.col
    if rel == "right":
        return t.col >= o.col + o.w
    if rel == "above":
        return t.row + t.h <= o.row
    return t.row >= o.row + o.h


def matching_objects(scene: Scene, tokens: Sequence[int]) -> list[int]:
    """Indices of all objects satisfying the expression ``tokens``."""
    words = [VOCAB[t] for t in tokens if t != PAD]
    objs = scene.objects
    sup = next((w for w in words if w in SUPERLATIVES), None)
    rel = next((w for w in words if w in RELATIONS), None)
    if sup is not None:
        shape, color = _parse_descriptor(words)
        cands = [i for i, ob in enumerate(objs) if _desc_match(ob, shape, color)]
        if not cands:
            return []
        areas = [objs[i].area for i in cands]
        best = max(areas) if SUPERLATIVES[sup] == "max" else min(areas)
        return [i for i, a in zip(cands, areas) if a == best]
    if rel is not None:
        k = words.index(rel)
        s1, c1 = _parse_descriptor(words[:k])
        s2, c2 = _parse_descriptor(words[k + 1 :])
        return [
            i
            for i, t in enumerate(objs)
            if _desc_match(t, s1, c1)
            and any(j != i and _desc_match(o, s2, c2) and _related(t, o, rel) for j, o in enumerate(objs))
        ]
    shape, color = _parse_descriptor(words)
    return [i for i, ob in enumerate(objs) if _desc_match(ob, shape, color)]


# ---------------------------------------------------------------- generation


@dataclass(frozen=True)
class GenSpec:
    n: int
    grid_size: int = 8
    seed: int = 0
    min_objects: int = 2
    max_objects: int = 4
    max_object_cells: int = 3
    # attribute / relational / superlative
    template_probs: tuple[float, float, float] = (0.4, 0.35, 0.25)


def _place_objects(rng: np.random.Generator, spec: GenSpec) -> tuple[SceneObject, ...] | None:
    g = spec.grid_size
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    occupied = np.zeros((g + 2, g + 2), dtype=bool)  # padded by one cell for the gap test
    objs: list[SceneObject] = []
    for _ in range(n_obj):
        for _attempt in range(50):
            w = int(rng.integers(1, spec.max_object_cells + 1))
            h = int(rng.integers(1, spec.max_object_cells + 1))
            col = int(rng.integers(0, g - w + 1))
            row = int(rng.integers(0, g - h + 1))
            # keep a one-cell gap so objects never touch in the feature grid
            if not occupied[row : row + h + 2, col : col + w + 2].any():
                break
        else:
            return None
        occupied[row + 1 : row + h + 1, col + 1 : col + w + 1] = True
        objs.append(
            SceneObject(int(rng.integers(len(SHAPES))), int(rng.integers(len(COLORS))), col, row, w, h)
        )
    return tuple(objs)


def _shape_word(rng: np.random.Generator, shape: int) -> str:
    syn = SHAPE_SYNONYMS[SHAPES[shape]]
    return syn[int(rng.integers(len(syn)))]


def _attribute_expressions(rng, scene: Scene, target: int) -> list[list[str]]:
    ob = scene.objects[target]
    shape, color = _shape_word(rng, ob.shape), COLORS[ob.color]
    return [
        ["the", color, shape],
        ["the", shape],
        ["the", color, "one" if rng.random() < 0.5 else "thing"],
    ]


def _relational_expressions(rng, scene: Scene, target: int) -> list[list[str]]:
    ob = scene.objects[target]
    out = []
    for j, other in enumerate(scene.objects):
        if j == target:
            continue
        for rel in RELATIONS:
            if not _related(ob, other, rel):
                continue
            rel_words = [rel, "of"] if rel in ("left", "right") else [rel]
            for d1 in (["the", _shape_word(rng, ob.shape)], ["the", COLORS[ob.color], _shape_word(rng, ob.shape)]):
                for d2 in (
                    ["the", _shape_word(rng, other.shape)],
                    ["the", COLORS[other.color], _shape_word(rng, other.shape)],
                ):
                    out.append(d1 + rel_words + d2)
    return out


def _superlative_expressions(rng, scene: Scene, target: int) -> list[list[str]]:
    ob = scene.objects[target]
    if sum(o.shape == ob.shape for o in scene.objects) < 2:
        return []
    words = [w for w in SUPERLATIVES]
    return [["the", w, _shape_word(rng, ob.shape)] for w in words]


_FAMILIES = (_attribute_expressions, _relational_expressions, _superlative_expressions)


def _sample_query(rng: np.random.Generator, scene: Scene, spec: GenSpec) -> Query | None:
    first = int(rng.choice(3, p=np.asarray(spec.template_probs, dtype=np.float64)))
    order = [first] + [f for f in range(3) if f != first]
    n_obj = len(scene.objects)
    for family in order:
        for target in rng.permutation(n_obj):
            exprs = _FAMILIES[family](rng, scene, int(target))
            exprs = [e for e in exprs if len(e) <= T_MAX]
            rng.shuffle(exprs)
            for words in exprs:
                tokens = tuple(TOKEN[w] for w in words)
                if matching_objects(scene, tokens) == [int(target)]:
                    return Query(tokens, int(target))
    return None


def item_rng(seed: int, index: int, stream: str = "item") -> np.random.Generator:
    """Deterministic per-item generator derived from ``(seed, stream, index)``."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(stream.encode()), index]))


def generate_sample(spec: GenSpec, index: int) -> Sample:
    rng = item_rng(spec.seed, index)
    for _ in range(MAX_SCENE_RETRIES):
        objs = _place_objects(rng, spec)
        if objs is None:
            continue
        scene = Scene(spec.grid_size, objs)
        query = _sample_query(rng, scene, spec)
        if query is None:
            continue
        gold = objs[query.target_index].center_box(spec.grid_size)
        return Sample(index, scene, query, gold)
    raise GenerationError(
        f"no valid scene after {MAX_SCENE_RETRIES} retries (seed={spec.seed}, index={index}, "
        f"grid={spec.grid_size}, objects={spec.min_objects}..{spec.max_objects})"
    )


def generate_dataset(spec: GenSpec) -> list[Sample]:
    if spec.n < 10:
        raise ValueError(f"n must be >= 10, got {spec.n}")
    return [generate_sample(spec, i) for i in range(spec.n)]


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitSpec:
    label_fraction: float
    seed: int = 0


def strip_label(sample: Sample) -> Sample:
    return dataclasses.replace(sample, query=Query(sample.query.tokens, None), gold=None, pseudo=False)


def n_labeled(n: int, fraction: float) -> int:
    return int(np.floor(fraction * n + 0.5))


def split(data: Sequence[Sample], spec: SplitSpec) -> tuple[list[Sample], list[Sample]]:
    """Partition ``data`` into labeled samples and label-stripped unlabeled copies."""
    if not 0.0 < spec.label_fraction <= 1.0:
        raise ValueError(f"label_fraction must be in (0, 1], got {spec.label_fraction}")
    k = n_labeled(len(data), spec.label_fraction)
    if k < 1:
        raise ValueError(f"label_fraction={spec.label_fraction} yields no labeled samples for n={len(data)}")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, zlib.crc32(b"split")]))
    perm = rng.permutation(len(data))
    chosen = set(perm[:k].tolist())
    labeled = [s for i, s in enumerate(data) if i in chosen]
    unlabeled = [strip_label(s) for i, s in enumerate(data) if i not in chosen]
    return labeled, unlabeled


class GoldView:
    """Sealed mapping ``sample id -> gold box`` for evaluation only.

    Training code never receives one of these; evaluation helpers take it as
    an explicit argument.
    """

    def __init__(self, samples: Iterable[Sample]):
        self._gold = {s.id: np.array(s.gold, dtype=np.float64) for s in samples if s.gold is not None}

    def __len__(self) -> int:
        return len(self._gold)

    def __contains__(self, sample_id: int) -> bool:
        return sample_id in self._gold

    def box(self, sample_id: int) -> np.ndarray:
        return self._gold[sample_id].copy()

    def boxes(self, ids: Iterable[int]) -> np.ndarray:
        return np.array([self._gold[i] for i in ids]).reshape(-1, 4)


# ---------------------------------------------------------------- augmentation


def _flip_tokens(tokens: tuple[int, ...]) -> tuple[int, ...]:
    swap = {TOKEN["left"]: TOKEN["right"], TOKEN["right"]: TOKEN["left"]}
    return tuple(swap.get(t, t) for t in tokens)


def _inside(box: np.ndarray, eps: float = 1e-9) -> bool:
    cx, cy, w, h = box
    return cx - w / 2 >= -eps and cy - h / 2 >= -eps and cx + w / 2 <= 1 + eps and cy + h / 2 <= 1 + eps


def transform(sample: Sample, flip: bool, dx: int, dy: int) -> Sample:
    """Apply a horizontal flip followed by a ``(dx, dy)`` cell translation."""
    g = sample.scene.grid_size
    objs = []
    for ob in sample.scene.objects:
        col = g - ob.col - ob.w if flip else ob.col
        objs.append(dataclasses.replace(ob, col=col + dx, row=ob.row + dy))
    tokens = _flip_tokens(sample.query.tokens) if flip else sample.query.tokens
    box = None
    if sample.gold is not None:
        box = np.array(sample.gold, dtype=np.float64)
        if flip:
            box[0] = 1.0 - box[0]
        box[0] += dx / g
        box[1] += dy / g
    return dataclasses.replace(
        sample,
        scene=Scene(g, tuple(objs)),
        query=Query(tokens, sample.query.target_index),
        gold=box,
    )


def augment(
    sample: Sample,
    rng: np.random.Generator,
    flip_prob: float = 0.5,
    shift_prob: float = 0.5,
    max_shift: int = 2,
    max_tries: int = 10,
) -> Sample:
    """Random horizontal flip and/or integer cell translation.

    Translations that would push any object or the target box outside the
    image are rejected and redrawn; after ``max_tries`` rejections no shift
    is applied.
    """
    g = sample.scene.grid_size
    flip = bool(rng.random() < flip_prob)
    dx = dy = 0
    if rng.random() < shift_prob:
        for _ in range(max_tries):
            cdx, cdy = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
            out = transform(sample, flip, cdx, cdy)
            ok = all(
                0 <= ob.col and ob.col + ob.w <= g and 0 <= ob.row and ob.row + ob.h <= g
                for ob in out.scene.objects
            )
            if ok and (out.gold is None or _inside(out.gold)):
                dx, dy = cdx, cdy
                break
    if not flip and dx == 0 and dy == 0:
        return sample
    return transform(sample, flip, dx, dy)


# ---------------------------------------------------------------- serialization


def sample_to_record(s: Sample) -> dict:
    return {
        "id": s.id,
        "grid": s.scene.grid_size,
        "objects": [[o.shape, o.color, o.col, o.row, o.w, o.h] for o in s.scene.objects],
        "tokens": list(s.query.tokens),
        "target": s.query.target_index,
        "gold": None if s.gold is None else [float(v) for v in s.gold],
        "pseudo": s.pseudo,
    }


def record_to_sample(rec: dict) -> Sample:
    scene = Scene(int(rec["grid"]), tuple(SceneObject(*map(int, o)) for o in rec["objects"]))
    gold = None if rec.get("gold") is None else np.array(rec["gold"], dtype=np.float64)
    return Sample(
        int(rec["id"]),
        scene,
        Query(tuple(int(t) for t in rec["tokens"]), rec.get("target")),
        gold,
        bool(rec.get("pseudo", False)),
    )


def dumps(samples: Iterable[Sample]) -> str:
    return "".join(json.dumps(sample_to_record(s), sort_keys=True) + "\n" for s in samples)


def save_dataset(samples: Iterable[Sample], path: str | Path) -> None:
    Path(path).write_text(dumps(samples), encoding="utf-8")


def load_dataset(path: str | Path) -> list[Sample]:
    with open(path, encoding="utf-8") as fh:
        return [record_to_sample(json.loads(line)) for line in fh if line.strip()]


def encode_batch(samples: Sequence[Sample], t_max: int = T_MAX) -> tuple[np.ndarray, np.ndarray]:
    """Stack visual features ``(B, G*G, F)`` and token ids ``(B, T)``.

    ``T`` is the longest query in the batch; shorter queries are padded.
    """
    g = samples[0].scene.grid_size
    vis = np.stack([s.scene.feature_grid.reshape(g * g, N_FEATURES) for s in samples])
    longest = max(len(s.query.tokens) for s in samples)
    if longest > t_max:
        raise ValueError(f"query of {longest} tokens exceeds t_max={t_max}")
    tokens = np.full((len(samples), longest), PAD, dtype=np.int64)
    for i, s in enumerate(samples):
        tokens[i, : len(s.query.tokens)] = s.query.tokens
    return vis, tokens

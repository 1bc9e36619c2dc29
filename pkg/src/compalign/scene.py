"""Synthetic compositional scenes: sampling, rendering, text, and perturbation.

A scene is a handful of flat-colored shapes placed one per cell on a square
grid.  Everything downstream (prompts, questions, oracle answers, diffusion
conditioning) is derived from :class:`SceneSpec`, so spatial relations are
computed from cell coordinates on demand and never stored.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from .errors import ApplicabilityError, CapacityError

SHAPES = ("circle", "square", "triangle")
PALETTE = {
    "red": (210, 20, 20),
    "green": (20, 170, 40),
    "blue": (20, 60, 230),
    "yellow": (255, 235, 0),
    "black": (20, 20, 20),
    "white": (250, 250, 250),
    "orange": (245, 125, 0),
    "purple": (150, 20, 200),
}
COLORS = tuple(PALETTE)
BACKGROUND = (165, 165, 165)

MAX_OBJECTS = 6
DEFAULT_CANVAS = 64
DEFAULT_GRID = 4
SCALE_RANGE = (0.5, 0.9)

NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six")
PERTURB_CATEGORIES = ("number_excess", "number_deficit", "attribute", "spatial", "aesthetic")

# Radial warp: the shape boundary radius is scaled by 1 + WARP_AMPLITUDE * d * cos(6 theta).
WARP_AMPLITUDE = 0.5
_FIXED = 1 << 14


@dataclass(frozen=True)
class SceneObject:
    id: int
    shape: str
    color: str
    cell: tuple[int, int]
    scale: float = 0.7
    distortion: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in PALETTE:
            raise ValueError(f"unknown color {self.color!r}")
        if not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            raise ValueError(f"scale {self.scale} outside {SCALE_RANGE}")
        if not 0.0 <= self.distortion <= 1.0:
            raise ValueError(f"distortion {self.distortion} outside [0, 1]")
        object.__setattr__(self, "cell", (int(self.cell[0]), int(self.cell[1])))

    @property
    def group(self) -> tuple[str, str]:
        return (self.color, self.shape)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "shape": self.shape,
            "color": self.color,
            "cell": list(self.cell),
            "scale": self.scale,
            "distortion": self.distortion,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        return cls(
            id=int(d["id"]),
            shape=d["shape"],
            color=d["color"],
            cell=tuple(d["cell"]),
            scale=float(d.get("scale", 0.7)),
            distortion=float(d.get("distortion", 0.0)),
        )


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...] = ()
    canvas: int = DEFAULT_CANVAS
    grid_size: int = DEFAULT_GRID
    seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.canvas % self.grid_size:
            raise ValueError(f"canvas {self.canvas} not divisible by grid size {self.grid_size}")
        if len(self.objects) > MAX_OBJECTS:
            raise CapacityError(f"{len(self.objects)} objects exceeds the cap of {MAX_OBJECTS}")
        if len(self.objects) > self.grid_size**2:
            raise CapacityError(f"{len(self.objects)} objects do not fit a {self.grid_size}x{self.grid_size} grid")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("two objects share a cell")
        for r, c in cells:
            if not (0 <= r < self.grid_size and 0 <= c < self.grid_size):
                raise ValueError(f"cell {(r, c)} outside the grid")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate object ids")

    @property
    def cell_size(self) -> int:
        return self.canvas // self.grid_size

    def free_cells(self) -> list[tuple[int, int]]:
        used = {o.cell for o in self.objects}
        return [(r, c) for r in range(self.grid_size) for c in range(self.grid_size) if (r, c) not in used]

    def by_id(self, object_id: int) -> SceneObject:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise KeyError(object_id)

    def with_objects(self, objects: Iterable[SceneObject]) -> "SceneSpec":
        return replace(self, objects=tuple(objects))

    def to_dict(self) -> dict:
        return {
            "canvas": self.canvas,
            "grid_size": self.grid_size,
            "seed": self.seed,
            "objects": [o.to_dict() for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            objects=tuple(SceneObject.from_dict(o) for o in d.get("objects", ())),
            canvas=int(d.get("canvas", DEFAULT_CANVAS)),
            grid_size=int(d.get("grid_size", DEFAULT_GRID)),
            seed=d.get("seed"),
        )


@dataclass(frozen=True)
class PromptText:
    text: str
    source_scene: Optional[SceneSpec] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.text:
            raise ValueError("prompt text must be nonempty")

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class Relation:
    """``subject`` is left of / above ``obj``; both are (color, shape) groups."""

    subject: tuple[str, str]
    relation: str
    obj: tuple[str, str]


@dataclass(frozen=True)
class GroundTruthMisalignment:
    category: str
    object_ids: tuple[int, ...] = ()
    delta: int = 0
    expected: object = None
    observed: object = None

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "object_ids": list(self.object_ids),
            "delta": self.delta,
            "expected": _jsonable(self.expected),
            "observed": _jsonable(self.observed),
        }


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


# ---------------------------------------------------------------------------
# sampling


def sample_scene(
    rng_seed: int,
    n_objects: int,
    canvas: int = DEFAULT_CANVAS,
    grid_size: int = DEFAULT_GRID,
) -> SceneSpec:
    """Draw a random scene with exactly ``n_objects`` undistorted objects."""
    if n_objects < 0:
        raise ValueError("n_objects must be nonnegative")
    if n_objects > grid_size * grid_size:
        raise CapacityError(f"{n_objects} objects do not fit {grid_size * grid_size} cells")
    if n_objects > MAX_OBJECTS:
        raise CapacityError(f"{n_objects} objects exceeds the cap of {MAX_OBJECTS}")
    rng = np.random.default_rng(rng_seed)
    cells = rng.choice(grid_size * grid_size, size=n_objects, replace=False)
    objects = []
    for i, k in enumerate(cells):
        objects.append(
            SceneObject(
                id=i,
                shape=SHAPES[int(rng.integers(len(SHAPES)))],
                color=COLORS[int(rng.integers(len(COLORS)))],
                cell=(int(k) // grid_size, int(k) % grid_size),
                scale=round(float(rng.uniform(*SCALE_RANGE)), 2),
            )
        )
    return SceneSpec(objects=tuple(objects), canvas=canvas, grid_size=grid_size, seed=rng_seed)


# ---------------------------------------------------------------------------
# rendering


def _radius2(scene: SceneSpec, obj: SceneObject) -> int:
    # radius in half-pixel units
    return int(round(obj.scale * scene.cell_size))


def shape_mask(shape: str, cell_size: int, radius2: int, distortion: float = 0.0) -> np.ndarray:
    """Boolean ``cell_size x cell_size`` stamp of one shape centred in its cell.

    Coordinates are integers in half-pixel units, so the stamp is bit-identical
    on every platform.  The outermost pixel ring is always left empty so that
    objects in neighbouring cells never touch.
    """
    offs = np.arange(cell_size, dtype=np.int64) * 2 + 1 - cell_size
    dy, dx = np.meshgrid(offs, offs, indexing="ij")
    amp = int(round(distortion * WARP_AMPLITUDE * _FIXED))
    if amp:
        r2 = dx * dx + dy * dy
        x2, y2 = dx * dx, dy * dy
        # cos(6 theta) = Re((x + iy)^6) / r^6
        re6 = x2**3 - 15 * x2 * x2 * y2 + 15 * x2 * y2 * y2 - y2**3
        cos6 = (re6 * _FIXED) // (r2**3)
        reach = radius2 * (_FIXED + (amp * cos6) // _FIXED)
    else:
        reach = np.full(dx.shape, radius2 * _FIXED, dtype=np.int64)
    ax, ay = np.abs(dx) * _FIXED, np.abs(dy) * _FIXED
    if shape == "circle":
        inside = (dx * dx + dy * dy) * _FIXED * _FIXED <= reach * reach
    elif shape == "square":
        inside = (ax <= reach) & (ay <= reach)
    elif shape == "triangle":
        sy = dy * _FIXED
        inside = (sy <= reach) & (2 * ax <= sy + reach)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    inside[0, :] = inside[-1, :] = False
    inside[:, 0] = inside[:, -1] = False
    return inside


def object_mask(scene: SceneSpec, obj: SceneObject) -> np.ndarray:
    """Full-canvas boolean mask of one object."""
    cs = scene.cell_size
    out = np.zeros((scene.canvas, scene.canvas), dtype=bool)
    r, c = obj.cell
    out[r * cs : (r + 1) * cs, c * cs : (c + 1) * cs] = shape_mask(obj.shape, cs, _radius2(scene, obj), obj.distortion)
    return out


def render(scene: SceneSpec) -> np.ndarray:
    """Rasterize ``scene`` to an ``(H, W, 3)`` uint8 RGB array."""
    img = np.empty((scene.canvas, scene.canvas, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    cs = scene.cell_size
    for obj in scene.objects:
        r, c = obj.cell
        stamp = shape_mask(obj.shape, cs, _radius2(scene, obj), obj.distortion)
        img[r * cs : (r + 1) * cs, c * cs : (c + 1) * cs][stamp] = PALETTE[obj.color]
    return img


# ---------------------------------------------------------------------------
# groups, relations, text


def group_key_order(key: tuple[str, str]) -> tuple[int, int]:
    return (COLORS.index(key[0]), SHAPES.index(key[1]))


def scene_groups(scene: SceneSpec) -> dict[tuple[str, str], list[SceneObject]]:
    """Objects bucketed by (color, shape), in canonical phrase order."""
    groups: dict[tuple[str, str], list[SceneObject]] = {}
    for o in scene.objects:
        groups.setdefault(o.group, []).append(o)
    return {k: groups[k] for k in sorted(groups, key=group_key_order)}


def group_relation(
    a: tuple[str, str],
    cells_a: list[tuple[int, int]],
    b: tuple[str, str],
    cells_b: list[tuple[int, int]],
) -> Optional[Relation]:
    """Canonical relation between two groups, or None if they interleave.

    Horizontal separation wins over vertical; the relation is always phrased
    as "left of" or "above" by choosing the subject accordingly.
    """
    cols_a = [c for _, c in cells_a]
    cols_b = [c for _, c in cells_b]
    rows_a = [r for r, _ in cells_a]
    rows_b = [r for r, _ in cells_b]
    if max(cols_a) < min(cols_b):
        return Relation(a, "left", b)
    if max(cols_b) < min(cols_a):
        return Relation(b, "left", a)
    if max(rows_a) < min(rows_b):
        return Relation(a, "above", b)
    if max(rows_b) < min(rows_a):
        return Relation(b, "above", a)
    return None


def relations(scene: SceneSpec) -> list[Relation]:
    """Relations verbalized by :func:`describe`, one per adjacent group pair.

    If no adjacent pair is separable, the first separable pair of any two
    groups is used instead so that multi-group scenes mention a relation
    whenever one exists.
    """
    groups = scene_groups(scene)
    keys = list(groups)
    cells = {k: [o.cell for o in v] for k, v in groups.items()}
    rels = []
    for a, b in zip(keys, keys[1:]):
        rel = group_relation(a, cells[a], b, cells[b])
        if rel is not None:
            rels.append(rel)
    if not rels:
        for i, a in enumerate(keys):
            for b in keys[i + 1 :]:
                rel = group_relation(a, cells[a], b, cells[b])
                if rel is not None:
                    return [rel]
    return rels


def plural(shape: str, n: int) -> str:
    return shape if n == 1 else shape + "s"


def group_phrase(key: tuple[str, str], n: int) -> str:
    return f"{key[0]} {plural(key[1], n)}"


RELATION_WORDS = {"left": "to the left of", "above": "above"}


def relation_clause(rel: Relation, counts: dict) -> str:
    n = counts[rel.subject]
    verb = "is" if n == 1 else "are"
    return (
        f"the {group_phrase(rel.subject, n)} {verb} {RELATION_WORDS[rel.relation]} "
        f"the {group_phrase(rel.obj, counts[rel.obj])}"
    )


def describe(scene: SceneSpec) -> PromptText:
    """Template prompt for ``scene``: noun phrases, then relation clauses."""
    groups = scene_groups(scene)
    if not groups:
        return PromptText("an empty scene", scene)
    counts = {k: len(v) for k, v in groups.items()}
    if len(scene.objects) == 1:
        (key,) = groups
        text = f"a {key[0]} {key[1]}"
    else:
        text = " and ".join(f"{NUMBER_WORDS[n]} {group_phrase(k, n)}" for k, n in counts.items())
    clauses = [relation_clause(r, counts) for r in relations(scene)]
    if clauses:
        text += "; " + "; ".join(clauses)
    return PromptText(text, scene)


_COLOR_RE = "|".join(COLORS)
_SHAPE_RE = "|".join(SHAPES)
_PHRASE = re.compile(rf"^(a|{'|'.join(NUMBER_WORDS[1:])}) ({_COLOR_RE}) ({_SHAPE_RE})s?$")
_CLAUSE = re.compile(
    rf"^the ({_COLOR_RE}) ({_SHAPE_RE})s? (?:is|are) (to the left of|above) the ({_COLOR_RE}) ({_SHAPE_RE})s?$"
)


def parse_prompt(text: str) -> tuple[dict[tuple[str, str], int], list[Relation]]:
    """Invert :func:`describe`: group counts and relations from prompt text."""
    text = str(text).strip()
    if text == "an empty scene":
        return {}, []
    head, *clauses = text.split("; ")
    counts: dict[tuple[str, str], int] = {}
    for phrase in head.split(" and "):
        m = _PHRASE.match(phrase)
        if not m:
            raise ValueError(f"unparseable noun phrase {phrase!r}")
        n = 1 if m.group(1) == "a" else NUMBER_WORDS.index(m.group(1))
        counts[(m.group(2), m.group(3))] = n
    rels = []
    for clause in clauses:
        m = _CLAUSE.match(clause)
        if not m:
            raise ValueError(f"unparseable relation clause {clause!r}")
        rel = "left" if m.group(3) == "to the left of" else "above"
        rels.append(Relation((m.group(1), m.group(2)), rel, (m.group(4), m.group(5))))
    return counts, rels


# ---------------------------------------------------------------------------
# perturbation


def relation_holds(rel: Relation, scene: SceneSpec) -> Optional[bool]:
    """Whether ``rel`` is true of ``scene`` (None if either group is absent)."""
    groups = scene_groups(scene)
    if rel.subject not in groups or rel.obj not in groups:
        return None
    a = [o.cell for o in groups[rel.subject]]
    b = [o.cell for o in groups[rel.obj]]
    axis = 1 if rel.relation == "left" else 0
    return max(x[axis] for x in a) < min(x[axis] for x in b)


def perturb(scene: SceneSpec, category: str, rng_seed: int) -> tuple[SceneSpec, GroundTruthMisalignment]:
    """Inject one known misalignment into ``scene``.

    The original scene's prompt paired with the render of the returned scene
    is a misaligned test pair; the record says exactly what changed.
    """
    if category not in PERTURB_CATEGORIES:
        raise ValueError(f"unknown perturbation category {category!r}")
    rng = np.random.default_rng(rng_seed)
    objs = list(scene.objects)
    original_rels = relations(scene)

    if category == "number_excess":
        free = scene.free_cells()
        if not objs or not free or len(objs) >= MAX_OBJECTS:
            raise ApplicabilityError("number_excess needs an object to copy and a free cell")
        src = objs[int(rng.integers(len(objs)))]
        order = [free[i] for i in rng.permutation(len(free))]
        new_id = max(o.id for o in objs) + 1
        chosen = None
        for cell in order:
            cand = scene.with_objects(objs + [replace(src, id=new_id, cell=cell)])
            if all(relation_holds(r, cand) for r in original_rels):
                chosen = cand
                break
        if chosen is None:
            chosen = scene.with_objects(objs + [replace(src, id=new_id, cell=order[0])])
        return chosen, GroundTruthMisalignment(
            "number_excess", (new_id,), +1, expected=src.group, observed=src.group
        )

    if category == "number_deficit":
        if not objs:
            raise ApplicabilityError("number_deficit needs at least one object")
        victim = objs[int(rng.integers(len(objs)))]
        rest = [o for o in objs if o.id != victim.id]
        return scene.with_objects(rest), GroundTruthMisalignment(
            "number_deficit", (victim.id,), -1, expected=victim.group, observed=None
        )

    if category == "attribute":
        groups = scene_groups(scene)
        if not groups:
            raise ApplicabilityError("attribute needs at least one object")
        keys = list(groups)
        singles = [k for k in keys if len(groups[k]) == 1]
        pool = singles or keys
        key = pool[int(rng.integers(len(pool)))]
        taken = {k[0] for k in keys if k[1] == key[1]}
        choices = [c for c in COLORS if c not in taken]
        new_color = choices[int(rng.integers(len(choices)))]
        ids = tuple(o.id for o in groups[key])
        objs = [replace(o, color=new_color) if o.id in ids else o for o in objs]
        return scene.with_objects(objs), GroundTruthMisalignment(
            "attribute", ids, 0, expected=key[0], observed=new_color
        )

    if category == "spatial":
        if not original_rels:
            raise ApplicabilityError("spatial needs a verbalized relation")
        free = scene.free_cells()
        moves = []
        for o in objs:
            for cell in free:
                moves.append((o, cell))
        for i in rng.permutation(len(moves)) if moves else []:
            o, cell = moves[int(i)]
            cand = scene.with_objects([replace(x, cell=cell) if x.id == o.id else x for x in objs])
            if not all(relation_holds(r, cand) for r in original_rels):
                return cand, GroundTruthMisalignment(
                    "spatial", (o.id,), 0, expected=o.cell, observed=cell
                )
        # no single move breaks a relation: swap two objects from different groups
        for a in objs:
            for b in objs:
                if a.group != b.group:
                    cand = scene.with_objects(
                        [replace(x, cell=b.cell) if x.id == a.id else replace(x, cell=a.cell) if x.id == b.id else x for x in objs]
                    )
                    if not all(relation_holds(r, cand) for r in original_rels):
                        return cand, GroundTruthMisalignment(
                            "spatial", (a.id, b.id), 0, expected=a.cell, observed=b.cell
                        )
        raise ApplicabilityError("no relocation violates a verbalized relation")

    # aesthetic
    if not objs:
        raise ApplicabilityError("aesthetic needs at least one object")
    target = objs[int(rng.integers(len(objs)))]
    objs = [replace(o, distortion=0.8) if o.id == target.id else o for o in objs]
    return scene.with_objects(objs), GroundTruthMisalignment(
        "aesthetic", (target.id,), 0, expected=0.0, observed=0.8
    )


def object_count_histogram(scene: SceneSpec) -> Counter:
    return Counter(o.group for o in scene.objects)

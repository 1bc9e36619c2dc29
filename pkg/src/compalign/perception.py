"""Programmatic perception of rendered (or generated) scene images.

``oracle_parse`` stands in for both the vision-language model's perception and
the segmentation model: it finds connected non-background components, names
their colour and shape, and measures how far each departs from a canonical
shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DimensionError
from .scene import BACKGROUND, COLORS, PALETTE, SHAPES

# Calibrated on the distortion-0 vs distortion-0.8 sweep (see tests/test_perception.py).
TAU_D = 0.14
MIN_CELL = 8
_PALETTE_RGB = np.array([BACKGROUND] + [PALETTE[c] for c in COLORS], dtype=np.int32)
_EIGHT = np.ones((3, 3), dtype=bool)
_SIZE_STEPS = np.linspace(0.86, 1.14, 8)
_OFFSETS = (-0.5, 0.0, 0.5)


@dataclass
class ParsedObject:
    shape: str
    color: str
    cell: tuple[int, int]
    centroid: tuple[float, float]  # (x, y) in pixels
    mask: np.ndarray = field(repr=False)
    distortion_score: float
    radius: float  # half-extent of the best-fit canonical shape, pixels

    @property
    def group(self) -> tuple[str, str]:
        return (self.color, self.shape)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class ParsedScene:
    objects: list[ParsedObject]
    unknown_regions: list[np.ndarray]
    canvas: int
    grid_size: int

    @property
    def cell_size(self) -> int:
        return self.canvas // self.grid_size


def check_canvas(image: np.ndarray, grid_size: int) -> int:
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] != image.shape[1]:
        raise DimensionError(f"expected a square RGB image, got shape {image.shape}")
    side = image.shape[0]
    if side % grid_size or side // grid_size < MIN_CELL:
        raise DimensionError(f"canvas {side} unsupported for a {grid_size}x{grid_size} grid")
    return side


def classify_pixels(image: np.ndarray) -> np.ndarray:
    """Nearest-colour labels: 0 = background, k = COLORS[k - 1]."""
    px = image.astype(np.int32)[..., None, :]
    d = ((px - _PALETTE_RGB) ** 2).sum(-1)
    return d.argmin(-1)


def _template(shape: str, xs: np.ndarray, ys: np.ndarray, cx: float, cy: float, r: float) -> np.ndarray:
    dx, dy = xs - cx, ys - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    # triangle: centroid sits r/3 below the bounding-box centre
    dy = dy + r / 3.0
    return (dy <= r) & (2 * np.abs(dx) <= dy + r)


def _equal_area_radius(shape: str, area: float) -> float:
    if shape == "circle":
        return float(np.sqrt(area / np.pi))
    if shape == "square":
        return float(np.sqrt(area) / 2)
    return float(np.sqrt(area / 2))


def fit_shape(mask: np.ndarray) -> tuple[str, float, float]:
    """Best canonical fit of a component mask: (shape, 1 - IoU, radius)."""
    ys, xs = np.nonzero(mask)
    cx, cy = xs.mean() + 0.5, ys.mean() + 0.5
    area = float(len(xs))
    pad = int(np.ceil(np.sqrt(area))) + 2
    y0, y1 = max(int(ys.min()) - pad, 0), min(int(ys.max()) + pad + 1, mask.shape[0])
    x0, x1 = max(int(xs.min()) - pad, 0), min(int(xs.max()) + pad + 1, mask.shape[1])
    win = mask[y0:y1, x0:x1]
    gy, gx = np.mgrid[y0:y1, x0:x1]
    gx = gx + 0.5
    gy = gy + 0.5
    best = ("", -1.0, 0.0)
    for shape in SHAPES:
        r0 = _equal_area_radius(shape, area)
        for k in _SIZE_STEPS:
            r = r0 * k
            for ox in _OFFSETS:
                for oy in _OFFSETS:
                    t = _template(shape, gx, gy, cx + ox, cy + oy, r)
                    inter = np.count_nonzero(t & win)
                    iou = inter / (np.count_nonzero(t) + area - inter)
                    if iou > best[1]:
                        best = (shape, iou, r)
    return best[0], 1.0 - best[1], best[2]


def _min_area(cell_size: int) -> int:
    return max(4, int(round(12 * (cell_size / 16) ** 2)))


def oracle_parse(image: np.ndarray, grid_size: int = 4, min_iou: float = 0.5) -> ParsedScene:
    """Segment and classify every object in ``image``."""
    side = check_canvas(image, grid_size)
    cs = side // grid_size
    labels = classify_pixels(image)
    comps, n = ndimage.label(labels > 0, structure=_EIGHT)
    objects: list[ParsedObject] = []
    unknown: list[np.ndarray] = []
    min_area = _min_area(cs)

    candidates = []
    for k, sl in enumerate(ndimage.find_objects(comps), start=1):
        comp = comps == k
        lab = labels[comp]
        counts = np.bincount(lab, minlength=len(COLORS) + 1)
        dominant = int(counts.argmax())
        if counts[dominant] >= 0.75 * lab.size:
            candidates.append((comp, dominant))
            continue
        # several colours touching: split by colour and keep the parts
        for c in np.nonzero(counts)[0]:
            sub, m = ndimage.label(comp & (labels == c), structure=_EIGHT)
            for j in range(1, m + 1):
                candidates.append((sub == j, int(c)))

    for comp, c in candidates:
        if comp.sum() < min_area:
            unknown.append(comp)
            continue
        shape, score, radius = fit_shape(comp)
        if 1.0 - score < min_iou:
            unknown.append(comp)
            continue
        ys, xs = np.nonzero(comp)
        cx, cy = float(xs.mean() + 0.5), float(ys.mean() + 0.5)
        cell = (min(int(cy // cs), grid_size - 1), min(int(cx // cs), grid_size - 1))
        objects.append(
            ParsedObject(
                shape=shape,
                color=COLORS[c - 1],
                cell=cell,
                centroid=(cx, cy),
                mask=comp,
                distortion_score=float(score),
                radius=float(radius),
            )
        )
    objects.sort(key=lambda o: (o.cell, o.color, o.shape))
    return ParsedScene(objects=objects, unknown_regions=unknown, canvas=side, grid_size=grid_size)

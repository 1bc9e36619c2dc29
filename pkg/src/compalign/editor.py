"""Detect text/image misalignments and repair them with masked inpainting.

Detection diffs expected against observed answers and attributes each failed
question to a root cause.  Questions that fail only because a referenced
group is absent (answer "none") are folded into the number or attribute
misalignment that explains the absence.  Localisation uses the perception
oracle; where several objects or cells could be edited, the candidate whose
simulated answers score best is chosen.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Optional, Protocol, Sequence

import numpy as np
import torch
from scipy import ndimage

from .diffusion.codec import IdentityCodec
from .diffusion.core import LatentState, denoise_step, forward_sample
from .diffusion.model import Denoiser
from .diffusion.schedule import NoiseSchedule
from .errors import BackendError, PlanningError, ProtocolError
from .perception import ParsedObject, ParsedScene, TAU_D, oracle_parse
from .qa import OracleQaGenerator, QAPair, QaGenerator
from .remote import DEFAULT_RETRIES, DEFAULT_TIMEOUT, decode_bitmap, encode_image, post_json
from .scene import SCALE_RANGE, SHAPES, SceneObject, SceneSpec, describe, group_key_order
from .vqa import ObjectView, OracleVqa, VqaBackend, answer_from_objects, compute_acc

log = logging.getLogger(__name__)

CATEGORY_PRIORITY = ("number_excess", "number_deficit", "attribute", "spatial", "aesthetic")
ACTIONS = ("remove", "add", "repaint", "relocate_remove_then_add", "normalize")
DILATION = 2


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class Misalignment:
    category: str
    failed_questions: tuple[int, ...]
    target: Optional[int] = None  # index into the parsed objects of the image
    expected: object = None
    observed: object = None
    delta: int = 0
    proposal: Optional[SceneObject] = None  # object to add, or the target's corrected form

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "failed_questions": list(self.failed_questions),
            "target": self.target,
            "expected": list(self.expected) if isinstance(self.expected, tuple) else self.expected,
            "observed": list(self.observed) if isinstance(self.observed, tuple) else self.observed,
            "delta": self.delta,
            "proposal": None if self.proposal is None else self.proposal.to_dict(),
        }


@dataclass
class EditPlan:
    action: str
    mask: np.ndarray = field(repr=False)
    local_condition: SceneSpec
    tau: int
    context: Optional[SceneSpec] = None  # full desired scene the inpainter is conditioned on
    steps: tuple = ()

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.action == "relocate_remove_then_add" and len(self.steps) != 2:
            raise ValueError("relocation needs a remove step and an add step")

    def leaves(self) -> list["EditPlan"]:
        return list(self.steps) if self.steps else [self]

    def to_dict(self) -> dict:
        return {
            "action": self.action,
            "tau": self.tau,
            "mask_pixels": int(self.mask.sum()),
            "local_condition": self.local_condition.to_dict(),
            "steps": [s.to_dict() for s in self.steps],
        }


@dataclass(frozen=True)
class Segmentation:
    masks: tuple
    background: np.ndarray


class Segmenter(Protocol):
    def segment(self, image: np.ndarray) -> Segmentation: ...


def _background(masks, shape) -> np.ndarray:
    bg = np.ones(shape, dtype=bool)
    for m in masks:
        bg &= ~m
    return bg


class OracleSegmenter:
    """Object masks from the perception oracle; unrecognised blobs count as objects too."""

    def __init__(self, grid_size: int = 4):
        self.grid_size = grid_size

    def segment(self, image: np.ndarray) -> Segmentation:
        parsed = oracle_parse(image, self.grid_size)
        masks = tuple(o.mask for o in parsed.objects) + tuple(parsed.unknown_regions)
        return Segmentation(masks, _background(masks, image.shape[:2]))


def remote_segment(endpoint: str, image: np.ndarray, timeout: float = DEFAULT_TIMEOUT,
                   retries: int = DEFAULT_RETRIES, backoff: float = 0.5) -> Segmentation:
    payload = post_json(endpoint, {"image": encode_image(image)}, timeout=timeout, retries=retries, backoff=backoff)
    if not isinstance(payload, dict) or not isinstance(payload.get("masks"), list):
        raise ProtocolError("response lacks a 'masks' list", payload)
    masks = []
    for m in payload["masks"]:
        if not isinstance(m, str):
            raise ProtocolError("mask must be a base64 PNG string", payload)
        bm = decode_bitmap(m)
        if bm.shape != image.shape[:2]:
            raise ProtocolError(f"mask shape {bm.shape} does not match image {image.shape[:2]}", payload)
        masks.append(bm)
    # later masks lose overlapping pixels so the set stays disjoint
    taken = np.zeros(image.shape[:2], dtype=bool)
    disjoint = []
    for m in masks:
        disjoint.append(m & ~taken)
        taken |= m
    return Segmentation(tuple(disjoint), ~taken)


class RemoteSegmenter:
    def __init__(self, endpoint: str, timeout: float = DEFAULT_TIMEOUT, retries: int = DEFAULT_RETRIES,
                 backoff: float = 0.5):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def segment(self, image):
        return remote_segment(self.endpoint, image, self.timeout, self.retries, self.backoff)


def make_segmenter(spec: Optional[str] = None, grid_size: int = 4, **kw) -> Segmenter:
    if spec in (None, "", "oracle"):
        return OracleSegmenter(grid_size)
    return RemoteSegmenter(spec, **kw)


# ---------------------------------------------------------------------------
# detection


def _views(objs: Sequence[ParsedObject]) -> list[ObjectView]:
    return [ObjectView(o.shape, o.color, o.centroid, o.distortion_score) for o in objs]


def _cell_center(cell, cs) -> tuple[float, float]:
    return ((cell[1] + 0.5) * cs, (cell[0] + 0.5) * cs)


def _sim_acc(pairs: Sequence[QAPair], views: Sequence[ObjectView], cs: float) -> float:
    return compute_acc(pairs, answer_from_objects(pairs, views, cs)).acc


def _free_cells(parsed: ParsedScene, exclude: Sequence[int] = ()) -> list[tuple[int, int]]:
    used = {o.cell for i, o in enumerate(parsed.objects) if i not in exclude}
    g = parsed.grid_size
    return [(r, c) for r in range(g) for c in range(g) if (r, c) not in used]


def _scale_of(o: ParsedObject, cs: int) -> float:
    return float(np.clip(round(2 * o.radius / cs, 2), *SCALE_RANGE))


def _best_placement(pairs, cs, obj_key, cells, base=()) -> Optional[tuple[tuple[int, int], float]]:
    best = None
    for cell in cells:
        v = ObjectView(obj_key[1], obj_key[0], _cell_center(cell, cs), 0.0)
        a = _sim_acc(pairs, list(base) + [v], cs)
        if best is None or a > best[1]:
            best = (cell, a)
    return best


def detect_misalignments(scene: SceneSpec, image: np.ndarray, backend: Optional[VqaBackend] = None,
                         qa_generator: Optional[QaGenerator] = None, pairs: Optional[Sequence[QAPair]] = None,
                         parsed: Optional[ParsedScene] = None) -> list[Misalignment]:
    """Failed questions grouped into root-cause misalignments, in priority order."""
    backend = backend or OracleVqa(scene.grid_size)
    if pairs is None:
        pairs = (qa_generator or OracleQaGenerator()).generate(describe(scene))
    report = compute_acc(pairs, backend.answer(image, pairs))
    if report.acc == 1.0:
        return []
    parsed = parsed or oracle_parse(image, scene.grid_size)
    cs = parsed.cell_size
    objs = parsed.objects
    views = _views(objs)
    exp_groups = Counter(o.group for o in scene.objects)
    obs_groups = Counter(o.group for o in objs)
    exp_shape = Counter(o.shape for o in scene.objects)
    obs_shape = Counter(o.shape for o in objs)
    failed = report.failed
    given = {i: report.per_question[i].given for i in failed}

    out: list[Misalignment] = []
    claimed: set[int] = set()
    owner: list[str] = []  # shape each number/attribute misalignment is about

    # number: per-shape count disagreement
    for shape in SHAPES:
        e, o = exp_shape.get(shape, 0), obs_shape.get(shape, 0)
        if e == o or e == 0:
            continue
        qs = tuple(i for i in failed if (pairs[i].category == "count" and f"many {shape}s" in pairs[i].question.lower())
                   or (pairs[i].category == "existence" and pairs[i].question.lower().endswith(f" {shape}?")))
        if not qs:
            continue
        groups = {k for k in set(exp_groups) | set(obs_groups) if k[1] == shape}
        owner.append(shape)
        if o > e:
            surplus = [i for i, ob in enumerate(objs) if ob.shape == shape and obs_groups[ob.group] > exp_groups[ob.group]]
            surplus = surplus or [i for i, ob in enumerate(objs) if ob.shape == shape]
            scores = [(_sim_acc(pairs, [v for j, v in enumerate(views) if j != i], cs), -k) for k, i in enumerate(surplus)]
            target = surplus[max(range(len(surplus)), key=lambda k: scores[k])]
            out.append(Misalignment("number_excess", qs, target, e, o, o - e))
        else:
            missing = sorted((k for k in groups if exp_groups[k] > obs_groups[k]), key=group_key_order)
            key = missing[0] if missing else next(iter(sorted(groups, key=group_key_order)))
            place = _best_placement(pairs, cs, key, _free_cells(parsed), base=views)
            prop = None
            if place is not None:
                prop = SceneObject(id=len(objs), shape=key[1], color=key[0], cell=place[0])
            out.append(Misalignment("number_deficit", qs, None, e, o, o - e, prop))
        claimed |= set(qs)

    # attribute: right number of a shape, wrong colours
    for shape in SHAPES:
        if exp_shape.get(shape, 0) != obs_shape.get(shape, 0) or not exp_shape.get(shape):
            continue
        missing = sorted((k for k in exp_groups if k[1] == shape and exp_groups[k] > obs_groups[k]), key=group_key_order)
        if not missing:
            continue
        wrong = [i for i, ob in enumerate(objs) if ob.shape == shape and obs_groups[ob.group] > exp_groups[ob.group]]
        if not wrong:
            continue
        best = None
        for i in wrong:
            for key in missing:
                trial = list(views)
                trial[i] = replace(trial[i], color=key[0])
                a = _sim_acc(pairs, trial, cs)
                if best is None or a > best[0]:
                    best = (a, i, key)
        _, i, key = best
        qs = tuple(j for j in failed if pairs[j].category in ("existence", "attribute")
                   and shape in pairs[j].question.lower())
        ob = objs[i]
        prop = SceneObject(id=i, shape=shape, color=key[0], cell=ob.cell, scale=_scale_of(ob, cs))
        out.append(Misalignment("attribute", qs, i, key[0], ob.color, 0, prop))
        owner.append(shape)
        claimed |= set(qs)

    # questions failing only because a group is absent belong to the causes above
    for j in failed:
        if j in claimed or given[j] != "none":
            continue
        q = pairs[j].question.lower()
        for k, m in enumerate(out):
            if m.category in ("number_excess", "number_deficit", "attribute") and owner[k] in q:
                out[k] = replace(m, failed_questions=m.failed_questions + (j,))
                claimed.add(j)
                break

    # spatial: both groups present, relation false
    spatial = [j for j in failed if j not in claimed and pairs[j].category == "spatial"]
    if spatial:
        involved = [i for i, ob in enumerate(objs)
                    if any(f"{ob.color} {ob.shape}" in pairs[j].question.lower() for j in spatial)]
        base_acc = _sim_acc(pairs, views, cs)
        best = None
        for i in involved:
            rest = [v for j, v in enumerate(views) if j != i]
            place = _best_placement(pairs, cs, objs[i].group, _free_cells(parsed, exclude=[i]), base=rest)
            if place is not None and (best is None or place[1] > best[0]):
                best = (place[1], i, place[0])
        target = prop = None
        if best is not None and best[0] > base_acc:
            _, target, cell = best
            ob = objs[target]
            prop = SceneObject(id=target, shape=ob.shape, color=ob.color, cell=cell, scale=_scale_of(ob, cs))
        out.append(Misalignment("spatial", tuple(spatial), target, None, None, 0, prop))
        claimed |= set(spatial)

    # aesthetic: a present group is judged malformed
    for j in failed:
        if j in claimed or pairs[j].category != "quality":
            continue
        q = pairs[j].question.lower()
        cands = [i for i, ob in enumerate(objs) if ob.shape in q and (ob.color in q or f"the {ob.shape}" in q)
                 and ob.distortion_score >= TAU_D]
        target = max(cands, key=lambda i: objs[i].distortion_score) if cands else None
        prop = None
        if target is not None:
            ob = objs[target]
            prop = SceneObject(id=target, shape=ob.shape, color=ob.color, cell=ob.cell, scale=_scale_of(ob, cs))
        out.append(Misalignment("aesthetic", (j,), target, "yes", given[j], 0, prop))
        claimed.add(j)

    # anything left keeps its own category so that it is at least reported
    for j in failed:
        if j not in claimed:
            cat = {"count": "number_deficit", "existence": "number_deficit", "attribute": "attribute",
                   "spatial": "spatial", "quality": "aesthetic"}[pairs[j].category]
            out.append(Misalignment(cat, (j,), None, pairs[j].expected_answer, given[j]))
    out.sort(key=lambda m: CATEGORY_PRIORITY.index(m.category))
    return out


# ---------------------------------------------------------------------------
# planning


def dilate(mask: np.ndarray, pixels: int = DILATION) -> np.ndarray:
    return ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool), iterations=pixels) if pixels else mask


def cell_mask(cell, canvas: int, grid_size: int) -> np.ndarray:
    cs = canvas // grid_size
    m = np.zeros((canvas, canvas), dtype=bool)
    m[cell[0] * cs : (cell[0] + 1) * cs, cell[1] * cs : (cell[1] + 1) * cs] = True
    return m


def scene_from_parse(parsed: ParsedScene, drop: Sequence[int] = (), replace_with: Sequence[SceneObject] = ()) -> SceneSpec:
    """Best-effort SceneSpec for the image, optionally dropping/overriding objects."""
    cs = parsed.cell_size
    by_cell: dict = {}
    for i, o in enumerate(parsed.objects):
        if i in drop:
            continue
        if o.cell in by_cell and by_cell[o.cell][1].area >= o.area:
            continue
        by_cell[o.cell] = (i, o)
    objs = {cell: SceneObject(id=i, shape=o.shape, color=o.color, cell=cell, scale=_scale_of(o, cs))
            for cell, (i, o) in by_cell.items()}
    for new in replace_with:
        objs = {c: v for c, v in objs.items() if v.id != new.id}
        objs[new.cell] = new
    ordered = sorted(objs.values(), key=lambda o: o.cell)
    ordered = [replace(o, id=k) for k, o in enumerate(ordered)]
    return SceneSpec(objects=tuple(ordered[:6]), canvas=parsed.canvas, grid_size=parsed.grid_size)


def _segment_mask(target: ParsedObject, seg: Optional[Segmenter], image: np.ndarray) -> np.ndarray:
    if seg is None:
        return target.mask
    masks = seg.segment(image).masks
    if not masks:
        return target.mask
    overlaps = [np.count_nonzero(m & target.mask) for m in masks]
    k = int(np.argmax(overlaps))
    return masks[k] if overlaps[k] else target.mask


def _object_edit_mask(parsed: ParsedScene, target: ParsedObject, seg, image) -> np.ndarray:
    # dilated, but kept inside the object's own cell so neighbours are untouched
    m = dilate(_segment_mask(target, seg, image)) & cell_mask(target.cell, parsed.canvas, parsed.grid_size)
    return m | target.mask


def plan_edit(m: Misalignment, image: np.ndarray, seg: Optional[Segmenter] = None, T: int = 50,
              parsed: Optional[ParsedScene] = None, grid_size: int = 4) -> EditPlan:
    """Map one misalignment to a masked edit with local conditioning."""
    parsed = parsed or oracle_parse(image, grid_size)
    canvas, g = parsed.canvas, parsed.grid_size
    empty = SceneSpec(canvas=canvas, grid_size=g)
    objs = parsed.objects

    def need_target():
        if m.target is None or not 0 <= m.target < len(objs):
            raise PlanningError(f"{m.category}: no object located to edit")
        return objs[m.target]

    if m.category == "number_excess":
        tgt = need_target()
        return EditPlan("remove", _object_edit_mask(parsed, tgt, seg, image), empty, T,
                        scene_from_parse(parsed, drop=[m.target]))
    if m.category == "number_deficit":
        if m.proposal is None:
            raise PlanningError("number_deficit: no free cell to add an object")
        add = m.proposal
        local = SceneSpec(objects=(replace(add, id=0),), canvas=canvas, grid_size=g)
        ctx = scene_from_parse(parsed, replace_with=[replace(add, id=-1)])
        return EditPlan("add", cell_mask(add.cell, canvas, g), local, T, ctx)
    if m.category == "attribute":
        tgt = need_target()
        if m.proposal is None:
            raise PlanningError("attribute: no corrected colour")
        local = SceneSpec(objects=(replace(m.proposal, id=0),), canvas=canvas, grid_size=g)
        ctx = scene_from_parse(parsed, replace_with=[m.proposal])
        return EditPlan("repaint", _object_edit_mask(parsed, tgt, seg, image), local, max(T // 2, 1), ctx)
    if m.category == "spatial":
        tgt = need_target()
        if m.proposal is None:
            raise PlanningError("spatial: no cell satisfies the stated relations")
        after_remove = scene_from_parse(parsed, drop=[m.target])
        remove = EditPlan("remove", _object_edit_mask(parsed, tgt, seg, image), empty, T, after_remove)
        moved = replace(m.proposal, id=-1)
        local = SceneSpec(objects=(replace(moved, id=0),), canvas=canvas, grid_size=g)
        ctx = scene_from_parse(parsed, drop=[m.target], replace_with=[moved])
        add = EditPlan("add", cell_mask(moved.cell, canvas, g), local, T, ctx)
        return EditPlan("relocate_remove_then_add", remove.mask | add.mask, local, T, ctx, (remove, add))
    if m.category == "aesthetic":
        tgt = need_target()
        fixed = m.proposal
        local = SceneSpec(objects=(replace(fixed, id=0),), canvas=canvas, grid_size=g)
        ctx = scene_from_parse(parsed, replace_with=[fixed])
        return EditPlan("normalize", cell_mask(tgt.cell, canvas, g), local, max(T // 2, 1), ctx)
    raise PlanningError(f"unknown category {m.category!r}")


# ---------------------------------------------------------------------------
# inpainting


@torch.no_grad()
def blended_inpaint(image: np.ndarray, plan: EditPlan, model: Denoiser, schedule: NoiseSchedule,
                    seed: int = 0) -> np.ndarray:
    """Masked re-denoising; pixels outside the mask come back bit-identical."""
    if plan.mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {plan.mask.shape} does not match image {image.shape[:2]}")
    out = image
    for k, step in enumerate(plan.leaves()):
        out = _inpaint_once(out, step, model, schedule, seed * 7919 + k)
    return out


def _inpaint_once(image, plan: EditPlan, model, schedule, seed) -> np.ndarray:
    if not plan.mask.any():
        return image.copy()
    codec = IdentityCodec()
    g = torch.Generator().manual_seed(seed)
    tau = min(plan.tau, schedule.T)
    z_orig = codec.encode(image[None])
    m = codec.latent_mask(plan.mask[None])
    cond_scene = plan.context if plan.context is not None else plan.local_condition
    cond = model.encoder.encode_batch([cond_scene], True)
    z = forward_sample(z_orig, tau, torch.randn(z_orig.shape, generator=g), schedule)
    state = LatentState(z, tau)
    while state.t > 0:
        state = denoise_step(state, model, cond, schedule, g)
        known = forward_sample(z_orig, state.t, torch.randn(z_orig.shape, generator=g), schedule)
        state = LatentState(m * state.z + (1 - m) * known, state.t)
    gen = codec.decode(state.z)[0]
    return np.where(plan.mask[..., None], gen, image)


# ---------------------------------------------------------------------------
# loop


@dataclass
class EditAttempt:
    iteration: int
    category: str
    action: Optional[str]
    accepted: bool
    acc_before: float
    acc_after: Optional[float]
    mask_pixels: int = 0
    outside_preserved: Optional[bool] = None
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CorrectionReport:
    attempts: list = field(default_factory=list)
    acc_trajectory: list = field(default_factory=list)
    remaining: list = field(default_factory=list)

    @property
    def final_acc(self) -> float:
        return self.acc_trajectory[-1]

    @property
    def edits(self) -> int:
        return sum(a.action is not None for a in self.attempts)

    def to_dict(self) -> dict:
        return {
            "acc_trajectory": list(self.acc_trajectory),
            "final_acc": self.final_acc,
            "attempts": [a.to_dict() for a in self.attempts],
            "remaining": [m.to_dict() for m in self.remaining],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def correction_loop(scene: SceneSpec, image: np.ndarray, model: Denoiser, schedule: NoiseSchedule,
                    backend: Optional[VqaBackend] = None, segmenter: Optional[Segmenter] = None,
                    qa_generator: Optional[QaGenerator] = None, max_iters: int = 5,
                    seed: int = 0) -> tuple[np.ndarray, CorrectionReport]:
    """Detect, plan, inpaint, re-score; keep an edit only if accuracy does not drop."""
    if max_iters < 0:
        raise ValueError("max_iters must be >= 0")
    backend = backend or OracleVqa(scene.grid_size)
    segmenter = segmenter or OracleSegmenter(scene.grid_size)
    pairs = (qa_generator or OracleQaGenerator()).generate(describe(scene))
    report = CorrectionReport()
    current = image
    acc = compute_acc(pairs, backend.answer(current, pairs)).acc
    report.acc_trajectory.append(acc)
    found: list[Misalignment] = []

    for it in range(max_iters):
        if acc == 1.0:
            found = []
            break
        try:
            found = detect_misalignments(scene, current, backend, pairs=pairs)
        except (BackendError, ProtocolError) as exc:
            report.attempts.append(EditAttempt(it, "detect", None, False, acc, None, error=str(exc)))
            continue
        parsed = oracle_parse(current, scene.grid_size)
        plan = chosen = None
        for m in found:
            try:
                plan = plan_edit(m, current, segmenter, schedule.T, parsed)
                chosen = m
                break
            except (PlanningError, BackendError, ProtocolError) as exc:
                report.attempts.append(EditAttempt(it, m.category, None, False, acc, None, error=str(exc)))
        if plan is None:
            break
        edited = blended_inpaint(current, plan, model, schedule, seed=seed * 1009 + it)
        try:
            new_acc = compute_acc(pairs, backend.answer(edited, pairs)).acc
        except (BackendError, ProtocolError) as exc:
            report.attempts.append(EditAttempt(it, chosen.category, plan.action, False, acc, None,
                                               int(plan.mask.sum()), error=str(exc)))
            report.acc_trajectory.append(acc)
            continue
        preserved = bool(np.array_equal(edited[~plan.mask], current[~plan.mask]))
        accepted = new_acc >= acc
        report.attempts.append(EditAttempt(it, chosen.category, plan.action, accepted, acc, new_acc,
                                           int(plan.mask.sum()), preserved))
        if accepted:
            current, acc = edited, new_acc
        report.acc_trajectory.append(acc)
    else:
        if acc < 1.0:
            try:
                found = detect_misalignments(scene, current, backend, pairs=pairs)
            except (BackendError, ProtocolError):
                found = []
    if acc == 1.0:
        found = []
    report.remaining = found
    return current, report

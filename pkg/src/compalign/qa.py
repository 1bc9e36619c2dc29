"""Question-answer generation from scenes (stand-in for the LLM text-analysis step)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, Union

from .errors import ProtocolError
from .remote import DEFAULT_RETRIES, DEFAULT_TIMEOUT, post_json
from .scene import (
    COLORS,
    SHAPES,
    PromptText,
    Relation,
    SceneSpec,
    group_key_order,
    parse_prompt,
    plural,
    relations,
    scene_groups,
)

CATEGORIES = ("existence", "count", "attribute", "spatial", "quality")
YES_NO = ("yes", "no")
DIGITS = tuple(str(i) for i in range(7))
VOCABULARY = {
    "existence": YES_NO,
    "count": DIGITS,
    "attribute": COLORS,
    "spatial": YES_NO,
    "quality": YES_NO,
}
ALL_TOKENS = frozenset(YES_NO + DIGITS + COLORS + SHAPES + ("none",))


@dataclass(frozen=True)
class QAPair:
    question: str
    category: str
    expected_answer: str
    target_ids: tuple[int, ...] = ()
    oracle_comparable: bool = True

    def __post_init__(self):
        if not self.question:
            raise ValueError("empty question")
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.oracle_comparable and self.expected_answer not in VOCABULARY[self.category]:
            raise ValueError(f"{self.expected_answer!r} is not a {self.category} answer")
        object.__setattr__(self, "target_ids", tuple(self.target_ids))

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "category": self.category,
            "expected_answer": self.expected_answer,
            "target_ids": list(self.target_ids),
            "oracle_comparable": self.oracle_comparable,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QAPair":
        return cls(
            question=d["question"],
            category=d["category"],
            expected_answer=d["expected_answer"],
            target_ids=tuple(d.get("target_ids", ())),
            oracle_comparable=d.get("oracle_comparable", True),
        )


def _be(n: int) -> str:
    return "Is" if n == 1 else "Are"


def noun(key: tuple[str, str], n: int) -> str:
    return f"{key[0]} {plural(key[1], n)}"


def quality_reference(key: tuple[str, str], n: int, shape_count: int) -> str:
    """Shortest unambiguous reference: shape alone when it is unique in the scene."""
    if shape_count == 1:
        return key[1]
    return noun(key, n)


def spatial_question(rel: Relation, counts: dict) -> str:
    n = counts[rel.subject]
    where = "to the left of" if rel.relation == "left" else "above"
    return f"{_be(n)} the {noun(rel.subject, n)} {where} the {noun(rel.obj, counts[rel.obj])}?"


def qa_from_structure(groups: dict[tuple[str, str], Sequence[int]], rels: Sequence[Relation]) -> list[QAPair]:
    """Template QA pairs for a scene given as groups of object ids plus relations."""
    keys = sorted(groups, key=group_key_order)
    counts = {k: len(groups[k]) for k in keys}
    shape_ids: dict[str, list[int]] = {}
    for k in keys:
        shape_ids.setdefault(k[1], []).extend(groups[k])
    shapes = sorted(shape_ids, key=SHAPES.index)

    pairs = [QAPair(f"Is there a {k[0]} {k[1]}?", "existence", "yes", groups[k]) for k in keys]
    pairs += [
        QAPair(f"How many {plural(s, 2)} are there?", "count", str(len(shape_ids[s])), shape_ids[s])
        for s in shapes
    ]
    for k in keys:
        if len(shape_ids[k[1]]) == 1:
            pairs.append(QAPair(f"What color is the {k[1]}?", "attribute", k[0], groups[k]))
    for rel in rels:
        ids = tuple(groups[rel.subject]) + tuple(groups[rel.obj])
        pairs.append(QAPair(spatial_question(rel, counts), "spatial", "yes", ids))
    for k in keys:
        n = counts[k]
        ref = quality_reference(k, n, len(shape_ids[k[1]]))
        pairs.append(QAPair(f"{_be(n)} the {ref} well-formed?", "quality", "yes", groups[k]))
    return pairs


def generate_qa(scene: SceneSpec) -> list[QAPair]:
    """Fixed-order QA pairs: existence, count, attribute, spatial, quality."""
    groups = {k: [o.id for o in v] for k, v in scene_groups(scene).items()}
    return qa_from_structure(groups, relations(scene))


def generate_qa_from_prompt(prompt: Union[str, PromptText]) -> list[QAPair]:
    """Same templates driven by prompt text alone; object ids are synthetic."""
    counts, rels = parse_prompt(str(prompt))
    groups, next_id = {}, 0
    for k in sorted(counts, key=group_key_order):
        groups[k] = list(range(next_id, next_id + counts[k]))
        next_id += counts[k]
    return qa_from_structure(groups, rels)


class QaGenerator(Protocol):
    def generate(self, prompt: PromptText) -> list[QAPair]: ...


class OracleQaGenerator:
    """Deterministic template generator; uses the prompt's source scene when present."""

    def generate(self, prompt: Union[PromptText, SceneSpec]) -> list[QAPair]:
        if isinstance(prompt, SceneSpec):
            return generate_qa(prompt)
        if prompt.source_scene is not None:
            return generate_qa(prompt.source_scene)
        return generate_qa_from_prompt(prompt)


def parse_qa_response(payload) -> list[QAPair]:
    """Wire response ``{"pairs": [...]}`` to QA pairs.

    Answers outside the closed vocabulary survive as free text with
    ``oracle_comparable=False``.
    """
    if not isinstance(payload, dict) or not isinstance(payload.get("pairs"), list):
        raise ProtocolError("response lacks a 'pairs' list", payload)
    out = []
    for item in payload["pairs"]:
        if not isinstance(item, dict):
            raise ProtocolError("pair is not an object", payload)
        for key in ("question", "answer", "category"):
            if not isinstance(item.get(key), str):
                raise ProtocolError(f"pair missing string field {key!r}", payload)
        category = item["category"].strip().lower()
        if category not in CATEGORIES:
            raise ProtocolError(f"unknown category {item['category']!r}", payload)
        answer = item["answer"].strip().lower()
        comparable = answer in VOCABULARY[category]
        if not item["question"].strip():
            raise ProtocolError("empty question", payload)
        out.append(
            QAPair(
                question=item["question"],
                category=category,
                expected_answer=answer if comparable else item["answer"],
                oracle_comparable=comparable,
            )
        )
    return out


def remote_generate_qa(
    endpoint: str,
    prompt: Union[str, PromptText],
    timeout: float = DEFAULT_TIMEOUT,
    retries: int = DEFAULT_RETRIES,
    backoff: float = 0.5,
) -> list[QAPair]:
    text = str(prompt)
    if not text:
        raise ValueError("prompt must be nonempty")
    payload = post_json(endpoint, {"prompt": text}, timeout=timeout, retries=retries, backoff=backoff)
    return parse_qa_response(payload)


class RemoteQaGenerator:
    def __init__(self, endpoint: str, timeout: float = DEFAULT_TIMEOUT, retries: int = DEFAULT_RETRIES,
                 backoff: float = 0.5):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def generate(self, prompt: Union[PromptText, SceneSpec]) -> list[QAPair]:
        if isinstance(prompt, SceneSpec):
            from .scene import describe

            prompt = describe(prompt)
        return remote_generate_qa(self.endpoint, prompt, self.timeout, self.retries, self.backoff)


def make_qa_generator(spec: Optional[str] = None, **kw) -> QaGenerator:
    """``None``/"oracle" for the template generator, otherwise an endpoint URL."""
    if spec in (None, "", "oracle"):
        return OracleQaGenerator()
    return RemoteQaGenerator(spec, **kw)

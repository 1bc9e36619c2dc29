"""Answering questions about images and scoring the answers.

The oracle backend answers the template questions by exact predicates over
:func:`~compalign.perception.oracle_parse`; the remote backend speaks a small
JSON protocol so a real vision-language model can be dropped in.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence, Union

import numpy as np

from .errors import ProtocolError, UndefinedAccuracyError
from .perception import TAU_D, oracle_parse
from .qa import ALL_TOKENS, CATEGORIES, QAPair
from .remote import DEFAULT_RETRIES, DEFAULT_TIMEOUT, encode_image, post_json
from .scene import COLORS, SHAPES

_C = "|".join(COLORS)
_S = "|".join(SHAPES)
_EXIST = re.compile(rf"^is there an? ({_C}) ({_S})\?$")
_COUNT = re.compile(rf"^how many ({_S})s are there\?$")
_COLOR = re.compile(rf"^what colou?r is the ({_S})\?$")
_SPATIAL = re.compile(rf"^(?:is|are) the ({_C}) ({_S})s? (to the left of|above) the ({_C}) ({_S})s?\?$")
_QUALITY = re.compile(rf"^(?:is|are) the (?:({_C}) )?({_S})s? well-formed\?$")


@dataclass(frozen=True)
class ObjectView:
    """Minimal object description the answer predicates need."""

    shape: str
    color: str
    centroid: tuple[float, float]
    distortion_score: float = 0.0


@dataclass(frozen=True)
class AnswerSet:
    answers: tuple[str, ...]
    unmapped: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "answers", tuple(self.answers))
        object.__setattr__(self, "unmapped", frozenset(self.unmapped))

    def __len__(self):
        return len(self.answers)


@dataclass(frozen=True)
class QuestionResult:
    qa: QAPair
    given: str
    correct: bool


@dataclass(frozen=True)
class EvalReport:
    per_question: tuple[QuestionResult, ...]
    acc: float
    per_category_acc: dict = field(default_factory=dict)

    @property
    def failed(self) -> list[int]:
        return [i for i, r in enumerate(self.per_question) if not r.correct]

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "per_category_acc": {k: self.per_category_acc[k] for k in CATEGORIES if k in self.per_category_acc},
            "per_question": [
                {
                    "question": r.qa.question,
                    "category": r.qa.category,
                    "expected": r.qa.expected_answer,
                    "given": r.given,
                    "correct": r.correct,
                }
                for r in self.per_question
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


def _question_text(q: Union[str, QAPair]) -> str:
    return q.question if isinstance(q, QAPair) else q


def _left_of(a: Sequence[ObjectView], b: Sequence[ObjectView], margin: float) -> bool:
    return max(o.centroid[0] for o in a) + margin <= min(o.centroid[0] for o in b)


def _above(a: Sequence[ObjectView], b: Sequence[ObjectView], margin: float) -> bool:
    return max(o.centroid[1] for o in a) + margin <= min(o.centroid[1] for o in b)


def answer_question(question: str, objects: Sequence[ObjectView], cell_size: float, tau_d: float = TAU_D) -> str:
    """Answer one template question from a list of perceived objects."""
    q = question.strip().lower()
    if m := _EXIST.match(q):
        return "yes" if any(o.color == m[1] and o.shape == m[2] for o in objects) else "no"
    if m := _COUNT.match(q):
        return str(sum(o.shape == m[1] for o in objects))
    if m := _COLOR.match(q):
        hits = [o for o in objects if o.shape == m[1]]
        if not hits:
            return "none"
        votes = Counter(o.color for o in hits)
        top = max(votes.values())
        return next(c for c in COLORS if votes.get(c) == top)
    if m := _SPATIAL.match(q):
        a = [o for o in objects if o.color == m[1] and o.shape == m[2]]
        b = [o for o in objects if o.color == m[4] and o.shape == m[5]]
        if not a or not b:
            return "none"
        holds = _left_of if m[3] == "to the left of" else _above
        return "yes" if holds(a, b, cell_size / 2) else "no"
    if m := _QUALITY.match(q):
        hits = [o for o in objects if o.shape == m[2] and (m[1] is None or o.color == m[1])]
        if not hits:
            return "none"
        return "yes" if all(o.distortion_score < tau_d for o in hits) else "no"
    return "none"


def answer_from_objects(questions: Sequence[Union[str, QAPair]], objects: Sequence[ObjectView], cell_size: float,
                        tau_d: float = TAU_D) -> AnswerSet:
    return AnswerSet(tuple(answer_question(_question_text(q), objects, cell_size, tau_d) for q in questions))


def oracle_answer(image: np.ndarray, questions: Sequence[Union[str, QAPair]], grid_size: int = 4,
                  tau_d: float = TAU_D) -> AnswerSet:
    parsed = oracle_parse(image, grid_size)
    return answer_from_objects(questions, parsed.objects, parsed.cell_size, tau_d)


def compute_acc(pairs: Sequence[QAPair], given: Union[AnswerSet, Sequence[str]]) -> EvalReport:
    """Fraction of questions whose given answer matches the expected token exactly."""
    if not isinstance(given, AnswerSet):
        given = AnswerSet(tuple(given))
    if not pairs:
        raise UndefinedAccuracyError("accuracy over zero questions is undefined")
    if len(pairs) != len(given):
        raise ValueError(f"{len(pairs)} questions but {len(given)} answers")
    results = tuple(
        QuestionResult(qa, ans, i not in given.unmapped and ans == qa.expected_answer)
        for i, (qa, ans) in enumerate(zip(pairs, given.answers))
    )
    flags = [r.correct for r in results]
    per_cat = {}
    for cat in CATEGORIES:
        sub = [r.correct for r in results if r.qa.category == cat]
        if sub:
            per_cat[cat] = sum(sub) / len(sub)
    return EvalReport(results, sum(flags) / len(flags), per_cat)


class VqaBackend(Protocol):
    def answer(self, image: np.ndarray, questions: Sequence[QAPair]) -> AnswerSet: ...


class OracleVqa:
    def __init__(self, grid_size: int = 4, tau_d: float = TAU_D):
        self.grid_size = grid_size
        self.tau_d = tau_d

    def answer(self, image, questions):
        return oracle_answer(image, questions, self.grid_size, self.tau_d)


def normalize_answers(raw: Sequence[str]) -> AnswerSet:
    answers, unmapped = [], set()
    for i, a in enumerate(raw):
        token = a.strip().lower()
        if token in ALL_TOKENS:
            answers.append(token)
        else:
            answers.append(a)
            unmapped.add(i)
    return AnswerSet(tuple(answers), frozenset(unmapped))


def remote_answer(endpoint: str, image: np.ndarray, questions: Sequence[Union[str, QAPair]],
                  timeout: float = DEFAULT_TIMEOUT, retries: int = DEFAULT_RETRIES, backoff: float = 0.5) -> AnswerSet:
    texts = [_question_text(q) for q in questions]
    body = {"image": encode_image(image), "questions": texts}
    payload = post_json(endpoint, body, timeout=timeout, retries=retries, backoff=backoff)
    if not isinstance(payload, dict) or not isinstance(payload.get("answers"), list):
        raise ProtocolError("response lacks an 'answers' list", payload)
    raw = payload["answers"]
    if not all(isinstance(a, str) for a in raw):
        raise ProtocolError("answers must be strings", payload)
    if len(raw) != len(texts):
        raise ProtocolError(f"{len(texts)} questions but {len(raw)} answers", payload)
    return normalize_answers(raw)


class RemoteVqa:
    def __init__(self, endpoint: str, timeout: float = DEFAULT_TIMEOUT, retries: int = DEFAULT_RETRIES,
                 backoff: float = 0.5):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def answer(self, image, questions):
        return remote_answer(self.endpoint, image, questions, self.timeout, self.retries, self.backoff)


def make_vqa_backend(spec: Optional[str] = None, grid_size: int = 4, **kw) -> VqaBackend:
    if spec in (None, "", "oracle"):
        return OracleVqa(grid_size)
    return RemoteVqa(spec, **kw)


def evaluate(image: np.ndarray, pairs: Sequence[QAPair], backend: VqaBackend) -> EvalReport:
    return compute_acc(pairs, backend.answer(image, pairs))

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compalign.errors import ProtocolError
from compalign.qa import (
    CATEGORIES,
    VOCABULARY,
    OracleQaGenerator,
    QAPair,
    generate_qa,
    generate_qa_from_prompt,
    make_qa_generator,
    parse_qa_response,
    RemoteQaGenerator,
)
from compalign.scene import SceneObject, SceneSpec, describe, sample_scene


def test_example_scene_questions():
    s = SceneSpec((
        SceneObject(0, "circle", "red", (0, 2)),
        SceneObject(1, "circle", "red", (1, 3)),
        SceneObject(2, "square", "blue", (2, 0)),
    ))
    got = [(p.question, p.category, p.expected_answer) for p in generate_qa(s)]
    assert got == [
        ("Is there a red circle?", "existence", "yes"),
        ("Is there a blue square?", "existence", "yes"),
        ("How many circles are there?", "count", "2"),
        ("How many squares are there?", "count", "1"),
        ("What color is the square?", "attribute", "blue"),
        ("Is the blue square to the left of the red circles?", "spatial", "yes"),
        ("Are the red circles well-formed?", "quality", "yes"),
        ("Is the square well-formed?", "quality", "yes"),
    ]


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10**7), st.integers(0, 6))
def test_qa_invariants(seed, n):
    s = sample_scene(seed, n)
    pairs = generate_qa(s)
    order = [CATEGORIES.index(p.category) for p in pairs]
    assert order == sorted(order)
    for p in pairs:
        assert p.expected_answer in VOCABULARY[p.category]
        assert set(p.target_ids) <= {o.id for o in s.objects}
    # the prompt alone yields the same questions and answers
    from_text = generate_qa_from_prompt(describe(s))
    assert [(p.question, p.category, p.expected_answer) for p in from_text] == \
        [(p.question, p.category, p.expected_answer) for p in pairs]
    if n:
        assert {"existence", "count", "quality"} <= {p.category for p in pairs}


def test_qa_pair_validation():
    with pytest.raises(ValueError):
        QAPair("", "count", "1")
    with pytest.raises(ValueError):
        QAPair("How many?", "colour", "1")
    with pytest.raises(ValueError):
        QAPair("How many circles are there?", "count", "seven")
    free = QAPair("How many circles are there?", "count", "seven", oracle_comparable=False)
    assert QAPair.from_dict(free.to_dict()) == free


def test_oracle_generator_uses_source_scene():
    s = sample_scene(9, 3)
    gen = OracleQaGenerator()
    assert gen.generate(describe(s)) == generate_qa(s)
    assert gen.generate(s) == generate_qa(s)
    assert isinstance(make_qa_generator(None), OracleQaGenerator)
    assert isinstance(make_qa_generator("http://localhost:1/qa"), RemoteQaGenerator)


def test_parse_qa_response():
    pairs = parse_qa_response({"pairs": [
        {"question": "Is there a red circle?", "answer": "Yes", "category": "existence"},
        {"question": "How big is it?", "answer": "quite big", "category": "attribute"},
    ]})
    assert pairs[0].expected_answer == "yes" and pairs[0].oracle_comparable
    assert pairs[1].expected_answer == "quite big" and not pairs[1].oracle_comparable


@pytest.mark.parametrize("payload", [
    [],
    {"pairs": "nope"},
    {"pairs": [{"question": "q?", "answer": "yes"}]},
    {"pairs": [{"question": "q?", "answer": "yes", "category": "mood"}]},
    {"pairs": [{"question": " ", "answer": "yes", "category": "existence"}]},
    {"pairs": [3]},
])
def test_parse_qa_response_rejects(payload):
    with pytest.raises(ProtocolError):
        parse_qa_response(payload)

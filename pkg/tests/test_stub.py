import numpy as np
import pytest

from compalign.editor import OracleSegmenter, RemoteSegmenter, correction_loop, remote_segment
from compalign.errors import BackendError, ProtocolError, TransportError
from compalign.harness.stub import StubServer
from compalign.qa import OracleQaGenerator, RemoteQaGenerator, remote_generate_qa
from compalign.scene import describe, render, sample_scene
from compalign.vqa import OracleVqa, RemoteVqa, evaluate, remote_answer


@pytest.fixture(scope="module")
def stub():
    with StubServer(slow_seconds=1.5) as s:
        yield s


SCENE = sample_scene(11, 3)
IMAGE = render(SCENE)


def test_qa_round_trip(stub):
    pairs = remote_generate_qa(stub.url + "/qa", describe(SCENE))
    key = lambda ps: [(p.question, p.category, p.expected_answer) for p in ps]  # noqa: E731
    assert key(pairs) == key(OracleQaGenerator().generate(describe(SCENE)))


def test_vqa_round_trip(stub):
    pairs = OracleQaGenerator().generate(describe(SCENE))
    got = remote_answer(stub.url + "/vqa", IMAGE, pairs)
    assert got == OracleVqa().answer(IMAGE, pairs)
    assert evaluate(IMAGE, pairs, RemoteVqa(stub.url + "/vqa")).acc == 1.0


def test_segment_round_trip(stub):
    remote = remote_segment(stub.url + "/segment", IMAGE)
    local = OracleSegmenter().segment(IMAGE)
    assert len(remote.masks) == len(local.masks) == 3
    for a, b in zip(remote.masks, local.masks):
        assert np.array_equal(a, b)
    assert np.array_equal(remote.background, local.background)


def test_flaky_recovers_with_retry(stub):
    pairs = OracleQaGenerator().generate(describe(SCENE))
    got = remote_answer(stub.url + "/flaky/vqa", IMAGE, pairs, backoff=0.01)
    assert got == OracleVqa().answer(IMAGE, pairs)
    assert stub.httpd.requests_for("/flaky/vqa") == 2


def test_timeout_is_transport_error(stub):
    with pytest.raises(TransportError):
        remote_generate_qa(stub.url + "/slow/qa", "a red circle", timeout=0.3, retries=0)


def test_persistent_503_exhausts_retries(stub):
    with pytest.raises(BackendError):
        remote_answer(stub.url + "/error/vqa", IMAGE, ["how many circles?"], retries=2, backoff=0.01)
    assert stub.httpd.requests_for("/error/vqa") == 3


@pytest.mark.parametrize("fault", ["malformed", "incomplete"])
@pytest.mark.parametrize("route", ["qa", "vqa", "segment"])
def test_bad_payload_is_protocol_error(stub, fault, route):
    url = f"{stub.url}/{fault}/{route}"
    with pytest.raises(ProtocolError):
        if route == "qa":
            remote_generate_qa(url, "a red circle", retries=0)
        elif route == "vqa":
            remote_answer(url, IMAGE, ["how many circles?"], retries=0)
        else:
            remote_segment(url, IMAGE, retries=0)


def test_unknown_route_is_not_retried(stub):
    with pytest.raises(BackendError) as ei:
        remote_answer(stub.url + "/nope", IMAGE, ["q"], retries=3, backoff=0.01)
    assert not ei.value.retryable


def test_remote_backends_drive_the_loop(stub):
    # an aligned image needs no edits, so no model is consulted
    out, rep = correction_loop(SCENE, IMAGE, None, None, backend=RemoteVqa(stub.url + "/vqa"),
                               segmenter=RemoteSegmenter(stub.url + "/segment"),
                               qa_generator=RemoteQaGenerator(stub.url + "/qa"))
    assert np.array_equal(out, IMAGE) and rep.final_acc == 1.0

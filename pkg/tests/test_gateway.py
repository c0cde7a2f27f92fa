"""Gateway parsing, retry policy, rate limiting, and scoring scales."""

from __future__ import annotations

import json
import math
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatialforge.gateway import (
    BadRequest,
    ChatRequest,
    Endpoint,
    FunctionGateway,
    GatewayError,
    HttpGateway,
    MalformedPairError,
    RateLimiter,
    ServiceUnavailable,
    SimilarityScore,
    TranscriptGateway,
    TranscriptMiss,
    VerdictParseError,
    chat_digest,
    classify_yes_no,
    clipscore_from_cosine,
    cosine,
    embed_digest,
    extract_json_array,
    salvage_truncated_array,
    similarity_digest,
    unit_norm,
    write_transcript,
)

from conftest import basis_vector

FIXTURES = json.loads(
    (Path(__file__).parent / "data" / "json_extraction_fixtures.json").read_text("utf-8")
)["cases"]


class TestClassifyYesNo:
    @pytest.mark.parametrize(
        "text,expected",
        [
            ("Yes, the description contains a spatial relation.", True),
            ("no", False),
            ("The answer is: NO.", False),
            ("TRUE", True),
            ("  False!  ", False),
            ("Well... yes I think so", True),
        ],
    )
    def test_verdicts(self, text, expected):
        assert classify_yes_no(text) is expected

    @pytest.mark.parametrize("text", ["", "maybe", "I am not sure about this"])
    def test_unparseable(self, text):
        with pytest.raises(VerdictParseError):
            classify_yes_no(text)

    def test_first_token_wins(self):
        assert classify_yes_no("No, wait, yes") is False


class TestExtractJsonArray:
    def test_empty_array(self):
        assert extract_json_array("[]") == []

    def test_fenced(self):
        text = '```json\n[{"question":"Q","answer":"A"}]\n```'
        assert extract_json_array(text) == [{"question": "Q", "answer": "A"}]

    def test_string_aware_balancing(self):
        text = 'Sure! [ {"question":"Where is the [red] box?","answer":"left"} ] hope this helps'
        assert extract_json_array(text) == [
            {"question": "Where is the [red] box?", "answer": "left"}
        ]

    def test_fixture_corpus(self):
        assert len(FIXTURES) >= 50
        for case in FIXTURES:
            expect = case["expect"]
            if expect["ok"]:
                assert extract_json_array(case["text"]) == expect["pairs"], case["name"]
            else:
                with pytest.raises(GatewayError) as err:
                    extract_json_array(case["text"])
                assert err.value.code == expect["error"], case["name"]

    def test_malformed_pair_carries_index(self):
        with pytest.raises(MalformedPairError) as err:
            extract_json_array('[{"question":"q","answer":"a"},{"question":"q2"}]')
        assert err.value.index == 1

    @settings(max_examples=100, deadline=None)
    @given(
        pairs=st.lists(
            st.tuples(
                st.text(min_size=1, max_size=40).filter(lambda s: s.strip()),
                st.text(min_size=1, max_size=40).filter(lambda s: s.strip()),
            ),
            max_size=6,
        )
    )
    def test_round_trip_any_brackets_and_quotes(self, pairs):
        payload = [{"question": q.strip(), "answer": a.strip()} for q, a in pairs]
        text = "noise [pre] " + json.dumps(payload, ensure_ascii=False) + " ]] tail"
        if payload:
            assert extract_json_array(text) == payload
        else:
            assert extract_json_array(json.dumps(payload)) == []

    def test_salvage_truncated(self):
        text = '[{"question":"q1","answer":"a1"},{"question":"q2","answer":"a2"},{"question":"q3'
        assert salvage_truncated_array(text) == [
            {"question": "q1", "answer": "a1"},
            {"question": "q2", "answer": "a2"},
        ]

    def test_salvage_without_any_complete_element(self):
        assert salvage_truncated_array('[{"question":"q1') is None


class _ScriptedSession:
    """Stub for requests.Session driven by a list of planned outcomes."""

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = 0

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls += 1
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome

        class _Resp:
            def __init__(self, status, payload):
                self.status_code = status
                self._payload = payload
                self.text = str(payload)

            def json(self):
                return self._payload

        return _Resp(*outcome)


def _chat_payload(text="Yes", finish="stop"):
    return {"choices": [{"message": {"content": text}, "finish_reason": finish}]}


def _gateway_with(outcomes, sleeps=None):
    gw = HttpGateway(
        chat=Endpoint(url="http://chat.test/v1", model="m", rate_per_s=1e9),
        embed=Endpoint(url="http://embed.test/v1", expected_dim=3, rate_per_s=1e9),
        similarity=Endpoint(url="http://sim.test/v1", rate_per_s=1e9),
        sleep=(sleeps.append if sleeps is not None else lambda s: None),
    )
    session = _ScriptedSession(outcomes)
    gw._session = lambda: session  # type: ignore[method-assign]
    return gw, session


class TestHttpRetry:
    def test_mock_echo_round_trip(self):
        gw, _ = _gateway_with([(200, _chat_payload("Yes"))])
        resp = gw.complete_chat(ChatRequest(prompt="hello"))
        assert resp.text == "Yes"
        assert resp.finish_reason == "stop"

    def test_two_failures_then_success_within_budget(self):
        import requests

        sleeps = []
        gw, session = _gateway_with(
            [requests.ConnectionError("down"), (502, {}), (200, _chat_payload("ok"))],
            sleeps=sleeps,
        )
        resp = gw.complete_chat(ChatRequest(prompt="x"))
        assert resp.text == "ok"
        assert session.calls == 3
        assert sleeps == [1.0, 2.0]

    def test_exhausted_budget_is_service_unavailable(self):
        gw, session = _gateway_with([(500, {}), (503, {}), (500, {})])
        with pytest.raises(ServiceUnavailable):
            gw.complete_chat(ChatRequest(prompt="x"))
        assert session.calls == 3

    def test_4xx_never_retries(self):
        gw, session = _gateway_with([(404, {"error": "nope"})])
        with pytest.raises(BadRequest):
            gw.complete_chat(ChatRequest(prompt="x"))
        assert session.calls == 1

    def test_embedding_dim_mismatch(self):
        from spatialforge.gateway import EmbeddingDimMismatch

        gw, _ = _gateway_with([(200, {"data": [{"embedding": [1.0, 0.0]}]})])
        with pytest.raises(EmbeddingDimMismatch):
            gw.embed_text("hi")

    def test_similarity_scales_cosine(self):
        gw, _ = _gateway_with([(200, {"cosine": 0.2})])
        score = gw.cross_modal_score("img.jpg", "words")
        assert score.value == pytest.approx(0.5)

    def test_similarity_bad_request_is_image_embed_failed(self):
        from spatialforge.gateway import ImageEmbedError

        gw, _ = _gateway_with([(422, {"error": "no image"})])
        with pytest.raises(ImageEmbedError):
            gw.cross_modal_score("broken.jpg", "words")


class TestRateLimiter:
    def test_blocks_at_configured_rate(self):
        now = {"t": 0.0}
        waits = []

        def clock():
            return now["t"]

        def sleep(s):
            waits.append(s)
            now["t"] += s

        limiter = RateLimiter(rate_per_s=2.0, capacity=1.0, clock=clock, sleep=sleep)
        limiter.acquire()  # token available immediately
        limiter.acquire()  # must wait 0.5s for refill
        limiter.acquire()
        assert waits == pytest.approx([0.5, 0.5])


class TestScales:
    def test_clipscore_endpoints(self):
        assert clipscore_from_cosine(1.0) == 2.5
        assert clipscore_from_cosine(-0.4) == 0.0
        assert clipscore_from_cosine(0.2) == pytest.approx(0.5)

    def test_monotone_and_clamped(self):
        cosines = [x / 10 for x in range(-10, 11)]
        scores = [clipscore_from_cosine(c) for c in cosines]
        assert scores == sorted(scores)
        assert min(scores) == 0.0

    def test_similarity_score_range_enforced(self):
        with pytest.raises(ValueError):
            SimilarityScore(2.6, scale="clipscore")
        with pytest.raises(ValueError):
            SimilarityScore(-1.5, scale="cosine")

    def test_unit_norm_and_cosine(self):
        v = unit_norm([3.0, 4.0])
        assert math.sqrt(sum(x * x for x in v)) == pytest.approx(1.0, abs=1e-6)
        assert cosine(basis_vector(0), basis_vector(1)) == 0.0
        assert cosine(basis_vector(2), basis_vector(2)) == 1.0

    def test_identical_strings_cosine_one(self):
        gw = FunctionGateway(embed=lambda text: [float(len(text)), 1.0, 2.0])
        a = gw.embed_text("same words")
        b = gw.embed_text("same words")
        assert cosine(a, b) == pytest.approx(1.0, abs=1e-6)


class TestTranscript:
    def test_replay_and_miss(self, tmp_path):
        request = ChatRequest(prompt="check this")
        entries = [
            {"request_digest": chat_digest(request), "response_text": "Yes."},
            {"request_digest": embed_digest("a question"), "response_text": "[1.0, 0.0]"},
            {
                "request_digest": similarity_digest("img.jpg", "a question"),
                "response_text": '{"cosine": 0.4}',
            },
        ]
        path = tmp_path / "transcript.jsonl"
        write_transcript(path, entries)
        gw = TranscriptGateway.load(path)
        assert gw.complete_chat(request).text == "Yes."
        assert gw.embed_text("a question") == [1.0, 0.0]
        assert gw.cross_modal_score("img.jpg", "a question").value == pytest.approx(1.0)
        with pytest.raises(TranscriptMiss):
            gw.complete_chat(ChatRequest(prompt="unknown"))

    def test_deterministic_replay(self, tmp_path):
        request = ChatRequest(prompt="p")
        path = tmp_path / "t.jsonl"
        write_transcript(
            path, [{"request_digest": chat_digest(request), "response_text": "stable"}]
        )
        gw = TranscriptGateway.load(path)
        outs = [gw.complete_chat(request).text for _ in range(5)]
        assert set(outs) == {"stable"}

    def test_finish_reason_passthrough(self, tmp_path):
        request = ChatRequest(prompt="long one")
        path = tmp_path / "t.jsonl"
        write_transcript(
            path,
            [{"request_digest": chat_digest(request), "response_text": "[{\"question\":",
              "finish_reason": "length"}],
        )
        response = TranscriptGateway.load(path).complete_chat(request)
        assert response.finish_reason == "length"

    def test_digest_depends_on_decoding_params(self):
        a = chat_digest(ChatRequest(prompt="p", temperature=0.0))
        b = chat_digest(ChatRequest(prompt="p", temperature=0.7))
        assert a != b


@pytest.fixture(scope="module")
def server_url():
    import threading
    import time

    import uvicorn

    from spatialforge.mockserver import create_app

    config = uvicorn.Config(create_app(), host="127.0.0.1", port=0, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    for _ in range(100):
        if server.started:
            break
        time.sleep(0.05)
    else:
        pytest.fail("mock server did not start")
    port = server.servers[0].sockets[0].getsockname()[1]
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=5)


class TestLiveMockServer:
    """Wiring test against the in-repo reference services over real HTTP."""

    def test_end_to_end_http(self, server_url):
        gw = HttpGateway(
            chat=Endpoint(url=f"{server_url}/chat", rate_per_s=1000),
            embed=Endpoint(url=f"{server_url}/embed", rate_per_s=1000),
            similarity=Endpoint(url=f"{server_url}/similarity", rate_per_s=1000),
        )
        verdict = gw.complete_chat(
            ChatRequest(prompt="Determine if the description provided below contains a spatial relation: a cup on a table")
        )
        assert classify_yes_no(verdict.text) is True
        vec1 = gw.embed_text("some question")
        vec2 = gw.embed_text("some question")
        assert vec1 == vec2
        assert math.sqrt(sum(x * x for x in vec1)) == pytest.approx(1.0, abs=1e-6)
        score = gw.cross_modal_score("img.jpg", "left of the door")
        assert 0.0 <= score.value <= 2.5
        again = gw.cross_modal_score("img.jpg", "left of the door")
        assert score.value == again.value

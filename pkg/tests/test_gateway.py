import json
import threading
import time

import httpx
import numpy as np
import pytest

from conftest import GOLDEN
from oracles import cosine_ref, hash_embedding_ref, overlap_ref, token_f1_ref
from ragsearch.gateway import (
    Gateway,
    GatewayError,
    GatewayTimeout,
    HTTPGateway,
    ProtocolError,
    ProviderProfile,
    RateLimited,
    StubGateway,
    hash_embedding,
    make_gateway,
    parse_judge_score,
)

MSG = [{"role": "user", "content": "hello"}]


def http_profile(**kw):
    base = dict(profile_id="live", kind="openai", base_url="http://llm.test/v1",
                models={"generator": "gen-m", "judge": "judge-m", "embedding": "emb-m", "reranker": "rr-m"},
                api_key_env="RAGSEARCH_TEST_KEY", backoff_base=0.5)
    base.update(kw)
    return ProviderProfile(**base)


def chat_body(text):
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


# -- stubs ------------------------------------------------------------------------


def test_stub_chat_is_deterministic():
    a = StubGateway(ProviderProfile.stub(0))
    b = StubGateway(ProviderProfile.stub(0))
    ctx = {"question": "what is a hash table?", "passages": ["A hash table maps keys. It is fast."]}
    assert a.chat(MSG, context=ctx) == b.chat(MSG, context=ctx) == "A hash table maps keys."


def test_stub_embedding_golden_vector():
    golden = json.loads((GOLDEN / "stub_embedding_abc.json").read_text())
    v = StubGateway(ProviderProfile.stub(0)).embed(["abc"])[0]
    assert v.shape == (64,)
    np.testing.assert_allclose(v, golden["vector"], atol=1e-12)
    np.testing.assert_allclose(hash_embedding("abc"), hash_embedding_ref("abc"), atol=1e-12)


def test_stub_embeddings_unit_norm_and_repeatable(gateway):
    texts = ["Fourier transform", "hash table buckets", "inflation", "inflation", ""]
    mat = gateway.embed(texts)
    assert np.allclose(np.linalg.norm(mat, axis=1), 1.0)
    assert np.array_equal(mat[2], mat[3])
    for row in mat:
        assert cosine_ref(row, row) == pytest.approx(1.0)
    for text, row in zip(texts, mat):
        np.testing.assert_allclose(row, hash_embedding_ref(text), atol=1e-12)


def test_stub_seed_changes_vectors():
    a = hash_embedding("consumer price index", seed=0)
    b = hash_embedding("consumer price index", seed=1)
    assert not np.allclose(a, b)


def test_stub_rerank_is_token_overlap(gateway, toy):
    q = "Who published the fast Fourier transform algorithm?"
    passages = [c.text for c in toy.corpus.chunks[:10]]
    assert gateway.rerank_score(q, passages) == pytest.approx([overlap_ref(q, p) for p in passages])
    assert gateway.rerank_score("zebra", ["apple pie"]) == [0.0]
    assert gateway.rerank_score("the hash table", ["the hash table"]) == [1.0]


def test_stub_judge(gateway):
    gold = "Joseph Fourier introduced the idea in 1822"
    assert gateway.judge("q?", gold, gold).score == pytest.approx(1.0)
    assert gateway.judge("q?", gold, "completely unrelated words").score == 0.0
    half = "Joseph Fourier wrote about heat"
    assert gateway.judge("q?", gold, half).score == pytest.approx(token_f1_ref(gold, half))


def test_semantic_score(gateway):
    assert gateway.semantic_score("hash tables are fast", "hash tables are fast") == pytest.approx(1.0)
    # single tokens landing in different buckets are orthogonal
    assert gateway.semantic_score("alpha", "beta") == 0.0
    # opposite signs in one bucket give cosine -1, clamped to 0
    assert cosine_ref(hash_embedding_ref("w0"), hash_embedding_ref("w18")) == pytest.approx(-1.0)
    assert gateway.semantic_score("w0", "w18") == 0.0
    a, b = "central banks raise interest rates", "banks raise rates to fight inflation"
    expected = max(0.0, cosine_ref(hash_embedding_ref(a), hash_embedding_ref(b)))
    assert gateway.semantic_score(a, b) == pytest.approx(expected, abs=1e-12)


def test_call_counters(gateway):
    gateway.chat(MSG, role="judge", task="judge", context={"gold_answer": "a", "answer": "a"})
    gateway.embed(["x", "y"], role="semantic")
    gateway.rerank_score("q", ["p"])
    assert gateway.calls == {"chat:judge": 1, "task:judge": 1, "embed:semantic": 1, "rerank": 1}


def test_bad_role_and_empty_inputs(gateway):
    with pytest.raises(ValueError):
        gateway.chat(MSG, role="embedding")
    with pytest.raises(ValueError):
        gateway.embed([])
    with pytest.raises(ValueError):
        gateway.rerank_score("q", [])


@pytest.mark.parametrize("text,expected", [
    ("85", 0.85), ("Score: 100", 1.0), ("0", 0.0), ("I would say 42.5 out of 100", 0.425),
    ("excellent", None), ("150", None), ("", None),
])
def test_parse_judge_score(text, expected):
    assert parse_judge_score(text) == expected


class _Scripted(Gateway):
    def __init__(self, replies):
        super().__init__(ProviderProfile.stub(0))
        self.replies = list(replies)

    def _chat(self, messages, role, task, context):
        return self.replies.pop(0)


def test_judge_retries_once_then_falls_back_to_f1():
    gw = _Scripted(["no idea", "70"])
    res = gw.judge("q", "gold answer", "gold")
    assert res.score == 0.7 and not res.flagged
    assert gw.calls["task:judge"] == 1 and gw.calls["task:judge_retry"] == 1

    gw = _Scripted(["no idea", "still no idea"])
    res = gw.judge("q", "gold answer", "gold")
    assert res.flagged
    assert res.score == pytest.approx(token_f1_ref("gold answer", "gold"))


def test_profile_validation():
    with pytest.raises(ValueError):
        ProviderProfile(timeout=0)
    with pytest.raises(ValueError):
        ProviderProfile(max_attempts=0)
    with pytest.raises(ValueError):
        ProviderProfile(models={"generator": "x"})
    assert isinstance(make_gateway(ProviderProfile.stub(3)), StubGateway)
    with pytest.raises(ValueError):
        make_gateway(ProviderProfile(kind="grpc"))


# -- HTTP client -----------------------------------------------------------


def test_retry_on_429_then_success(monkeypatch):
    monkeypatch.setenv("RAGSEARCH_TEST_KEY", "sekrit")
    statuses = [429, 429, 200]
    seen = []

    def handler(request):
        seen.append(request)
        status = statuses.pop(0)
        if status != 200:
            return httpx.Response(status, json={"error": "slow down"})
        return httpx.Response(200, json=chat_body("hi there"))

    sleeps = []
    gw = HTTPGateway(http_profile(), transport=httpx.MockTransport(handler), sleep=sleeps.append)
    assert gw.chat(MSG, role="judge") == "hi there"
    assert gw.attempts == 3
    assert sleeps == [0.5, 1.0]
    req = seen[-1]
    assert req.url.path == "/v1/chat/completions"
    assert req.headers["authorization"] == "Bearer sekrit"
    body = json.loads(req.content)
    assert body == {"model": "judge-m", "messages": MSG, "temperature": 0}


def test_rate_limit_surfaces_after_max_attempts():
    gw = HTTPGateway(http_profile(max_attempts=2),
                     transport=httpx.MockTransport(lambda r: httpx.Response(429)), sleep=lambda s: None)
    with pytest.raises(RateLimited):
        gw.chat(MSG)
    assert gw.attempts == 2


def test_server_error_and_client_error():
    gw = HTTPGateway(http_profile(max_attempts=3),
                     transport=httpx.MockTransport(lambda r: httpx.Response(503)), sleep=lambda s: None)
    with pytest.raises(GatewayError):
        gw.chat(MSG)
    assert gw.attempts == 3
    gw = HTTPGateway(http_profile(), transport=httpx.MockTransport(lambda r: httpx.Response(401, text="no")),
                     sleep=lambda s: None)
    with pytest.raises(GatewayError):
        gw.chat(MSG)
    assert gw.attempts == 1


def test_malformed_json_is_protocol_error():
    gw = HTTPGateway(http_profile(), transport=httpx.MockTransport(
        lambda r: httpx.Response(200, content=b"{not json", headers={"content-type": "application/json"})))
    with pytest.raises(ProtocolError):
        gw.chat(MSG)
    gw = HTTPGateway(http_profile(), transport=httpx.MockTransport(lambda r: httpx.Response(200, json={"x": 1})))
    with pytest.raises(ProtocolError):
        gw.chat(MSG)


def test_timeout_is_retried_then_raised():
    def handler(request):
        raise httpx.ReadTimeout("slow", request=request)

    gw = HTTPGateway(http_profile(max_attempts=2), transport=httpx.MockTransport(handler), sleep=lambda s: None)
    with pytest.raises(GatewayTimeout):
        gw.chat(MSG)
    assert gw.attempts == 2


def test_embeddings_are_batched_and_reordered():
    requests = []

    def handler(request):
        body = json.loads(request.content)
        requests.append(body["input"])
        data = [{"index": i, "embedding": [float(len(t)), 1.0]} for i, t in enumerate(body["input"])]
        return httpx.Response(200, json={"data": data[::-1]})

    gw = HTTPGateway(http_profile(embed_batch_size=2), transport=httpx.MockTransport(handler))
    texts = ["a", "bbb", "cc", "dddd", "e"]
    mat = gw.embed(texts)
    assert sorted(map(tuple, requests)) == [("a", "bbb"), ("cc", "dddd"), ("e",)]
    expected = np.array([[len(t), 1.0] for t in texts])
    expected /= np.linalg.norm(expected, axis=1, keepdims=True)
    np.testing.assert_allclose(mat, expected)


def test_rerank_route():
    def handler(request):
        body = json.loads(request.content)
        assert request.url.path == "/v1/rerank"
        assert body["model"] == "rr-m" and body["query"] == "q"
        return httpx.Response(200, json={"scores": [0.1 * i for i in range(len(body["documents"]))]})

    gw = HTTPGateway(http_profile(), transport=httpx.MockTransport(handler))
    assert gw.rerank_score("q", ["a", "b", "c"]) == pytest.approx([0.0, 0.1, 0.2])


def test_parallel_requests_respect_the_bound():
    lock = threading.Lock()
    state = {"now": 0, "peak": 0}

    def handler(request):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        time.sleep(0.02)
        with lock:
            state["now"] -= 1
        return httpx.Response(200, json=chat_body("ok"))

    gw = HTTPGateway(http_profile(max_parallel=2), transport=httpx.MockTransport(handler))
    threads = [threading.Thread(target=gw.chat, args=(MSG,)) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert state["peak"] <= 2
    assert gw.calls["chat:generator"] == 8

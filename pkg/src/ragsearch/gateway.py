"""Clients for chat, embedding and reranker endpoints, plus offline stubs.

Every provider sits behind :class:`Gateway`, which also owns the two
generation scores (LLM judge and embedding similarity). The HTTP client
speaks the OpenAI-compatible ``/chat/completions`` and ``/embeddings`` routes
and a ``{query, documents} -> {scores}`` reranker route. :class:`StubGateway`
is a pure function of its inputs and seed, so tests need no network.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import httpx
import numpy as np

from . import templates
from .text import first_sentence, overlap, sentences, token_f1, tokenize

log = logging.getLogger(__name__)

ROLES = ("generator", "judge", "embedding", "reranker")


class GatewayError(RuntimeError):
    pass


class GatewayTimeout(GatewayError):
    pass


class RateLimited(GatewayError):
    pass


class ProtocolError(GatewayError):
    pass


@dataclass
class ProviderProfile:
    profile_id: str = "stub"
    kind: str = "stub"
    base_url: str = ""
    models: dict[str, str] = field(default_factory=lambda: {r: "stub" for r in ROLES})
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_parallel: int = 4
    max_attempts: int = 5
    backoff_base: float = 1.0
    embed_batch_size: int = 64
    rerank_path: str = "/rerank"
    seed: int = 0
    dim: int = 64

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_attempts < 1 or self.max_parallel < 1:
            raise ValueError("max_attempts and max_parallel must be at least 1")
        missing = [r for r in ROLES if r not in self.models]
        if missing:
            raise ValueError(f"profile {self.profile_id!r} has no model for roles {missing}")

    @property
    def embedding_profile(self) -> str:
        return re.sub(r"[^\w.-]+", "_", f"{self.profile_id}-{self.models['embedding']}")

    @classmethod
    def from_dict(cls, d: dict) -> "ProviderProfile":
        return cls(**d)

    @classmethod
    def stub(cls, seed: int = 0) -> "ProviderProfile":
        return cls(profile_id=f"stub-{seed}", kind="stub", seed=seed)


@dataclass(frozen=True)
class JudgeResult:
    score: float
    flagged: bool = False
    raw: str = ""


def parse_judge_score(text: str) -> float | None:
    m = re.search(r"-?\d+(?:\.\d+)?", text or "")
    if not m:
        return None
    value = float(m.group())
    if not 0.0 <= value <= 100.0:
        return None
    return value / 100.0


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def _normalize_rows(mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if not np.all(np.isfinite(mat)):
        raise ProtocolError("embedding contains non-finite values")
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return mat / norms


class Gateway:
    """Common front end; subclasses implement ``_chat``, ``_embed``, ``_rerank``.

    ``calls`` counts requests by ``"chat:<role>"``, ``"task:<task>"``,
    ``"embed:<role>"`` and ``"rerank"``.
    """

    def __init__(self, profile: ProviderProfile):
        self.profile = profile
        self.calls: Counter[str] = Counter()
        self._lock = threading.Lock()

    @property
    def profile_id(self) -> str:
        return self.profile.profile_id

    def _count(self, *keys: str) -> None:
        with self._lock:
            for key in keys:
                self.calls[key] += 1

    def chat(self, messages: Sequence[dict], *, role: str = "generator", task: str = "generate",
             context: dict | None = None) -> str:
        """One temperature-0 completion. ``task`` and ``context`` describe the
        request for logging and for the offline stub; live endpoints only see
        ``messages``."""
        if role not in ("generator", "judge"):
            raise ValueError(f"chat role must be generator or judge, not {role!r}")
        self._count(f"chat:{role}", f"task:{task}")
        text = self._chat(list(messages), role, task, context or {})
        if not text:
            raise ProtocolError("empty completion")
        return text

    def embed(self, texts: Sequence[str], *, role: str = "query") -> np.ndarray:
        if not texts:
            raise ValueError("embed needs at least one text")
        self._count(f"embed:{role}")
        mat = _normalize_rows(self._embed(list(texts)))
        if mat.shape[0] != len(texts):
            raise ProtocolError(f"expected {len(texts)} embeddings, got {mat.shape[0]}")
        return mat

    def rerank_score(self, query: str, passages: Sequence[str]) -> list[float]:
        if not passages:
            raise ValueError("rerank needs at least one passage")
        self._count("rerank")
        scores = [float(s) for s in self._rerank(query, list(passages))]
        if len(scores) != len(passages):
            raise ProtocolError(f"expected {len(passages)} rerank scores, got {len(scores)}")
        return scores

    def judge(self, question: str, gold_answer: str, answer: str) -> JudgeResult:
        """Judge score in [0, 1]: an integer 0-100 from the judge model over 100.
        One retry on an unreadable reply, then token F1 against the gold answer
        with ``flagged`` set."""
        fields = {"question": question, "gold_answer": gold_answer, "answer": answer}
        reply = ""
        for name in ("judge", "judge_retry"):
            prompt = templates.render(name, **fields)
            reply = self.chat([{"role": "user", "content": prompt}], role="judge", task=name, context=fields)
            score = parse_judge_score(reply)
            if score is not None:
                return JudgeResult(score, False, reply)
        log.warning("judge reply unreadable after retry; using token F1: %r", reply[:80])
        return JudgeResult(token_f1(gold_answer, answer), True, reply)

    def semantic_score(self, gold_answer: str, answer: str) -> float:
        vecs = self.embed([gold_answer, answer], role="semantic")
        return max(0.0, min(1.0, cosine(vecs[0], vecs[1])))

    def _chat(self, messages, role, task, context) -> str:
        raise NotImplementedError

    def _embed(self, texts: list[str]) -> np.ndarray:
        raise NotImplementedError

    def _rerank(self, query: str, passages: list[str]) -> list[float]:
        raise NotImplementedError


# -- offline stubs -------------------------------------------------------------


def hash_embedding(text: str, dim: int = 64, seed: int = 0) -> np.ndarray:
    """Signed feature hashing of the token multiset, unit-normalised.

    Each token adds +-1 to one of ``dim`` buckets chosen by a seeded BLAKE2b
    digest. Text without tokens maps to the first basis vector.
    """
    vec = np.zeros(dim)
    for tok in tokenize(text):
        digest = hashlib.blake2b(f"{seed}:{tok}".encode(), digest_size=8).digest()
        bucket = int.from_bytes(digest[:4], "little") % dim
        vec[bucket] += 1.0 if digest[4] & 1 else -1.0
    norm = np.linalg.norm(vec)
    if norm == 0:
        vec[0] = 1.0
        return vec
    return vec / norm


_VARIANT_TEMPLATES = {
    "multi_query": ("what is known about {core}", "explain {core}", "{core} overview", "details of {core}"),
    "rag_fusion": ("{core}", "{core} definition", "{core} examples", "{core} history"),
    "decomposition": ("what is {core}", "how does {core} work", "why does {core} matter", "where is {core} used"),
}


def _core(question: str) -> str:
    return question.strip().rstrip("?").strip()


class StubGateway(Gateway):
    """Deterministic providers: hash embeddings, token-overlap reranker,
    first-sentence generator and a token-F1 judge."""

    def _embed(self, texts):
        return np.vstack([hash_embedding(t, self.profile.dim, self.profile.seed) for t in texts])

    def _rerank(self, query, passages):
        return [overlap(query, p) for p in passages]

    def _chat(self, messages, role, task, ctx):
        q = ctx.get("question", "")
        n = int(ctx.get("n", 3))
        if task in _VARIANT_TEMPLATES:
            forms = _VARIANT_TEMPLATES[task]
            return "\n".join(forms[i % len(forms)].format(core=_core(q)) for i in range(n))
        if task == "step_back":
            return f"What is the general background of {_core(q)}?"
        if task == "hyde":
            return f"{_core(q)} is described in the following passage."
        if task == "query_rewriting":
            return " ".join(t for t in tokenize(q) if len(t) > 3) or q
        if task == "hype_questions":
            sents = sentences(ctx["passage"]) or [ctx["passage"]]
            return "\n".join(
                f"What does the text say about {' '.join(tokenize(sents[i % len(sents)])[:8])}?" for i in range(n)
            )
        if task == "llm_rerank":
            cands = ctx["candidates"]
            qt = set(tokenize(q))
            def jaccard(text):
                pt = set(tokenize(text))
                return len(qt & pt) / len(qt | pt) if qt | pt else 0.0
            order = sorted(range(len(cands)), key=lambda i: (-jaccard(cands[i][1]), i))
            return ", ".join(cands[i][0] for i in order)
        if task == "tree_summarize":
            return " ".join(first_sentence(p) for p in ctx["passages"])
        if task == "llm_refine_draft":
            return first_sentence(ctx["passage"])
        if task == "llm_refine_step":
            return f"{ctx['draft']} {first_sentence(ctx['passage'])}"
        if task == "generate":
            passages = ctx.get("passages") or []
            return first_sentence(passages[0]) if passages else "No answer found."
        if task == "critique":
            terms = set(tokenize(q))
            covered = terms & set(tokenize(ctx["answer"]))
            return f"The answer covers {len(covered)} of {len(terms)} question terms."
        if task == "revise":
            best = _best_sentence(q, ctx.get("passages") or [])
            answer = ctx["answer"]
            if best and best not in answer:
                return f"{answer} {best}"
            return answer
        if task in ("judge", "judge_retry"):
            return repr(100.0 * token_f1(ctx["gold_answer"], ctx["answer"]))
        raise GatewayError(f"stub has no behaviour for task {task!r}")


def _best_sentence(question: str, passages: Sequence[str]) -> str:
    best, best_score = "", 0.0
    for p in passages:
        for s in sentences(p):
            score = overlap(question, s)
            if score > best_score:
                best, best_score = s, score
    return best


# -- HTTP client ---------------------------------------------------------------


class HTTPGateway(Gateway):
    """OpenAI-compatible client with bounded parallelism and retry/backoff.

    Retries cover timeouts, HTTP 429 and 5xx. ``attempts`` records how many
    tries the most recent request took.
    """

    RETRY_STATUS = frozenset({429, 500, 502, 503, 504})

    def __init__(self, profile: ProviderProfile, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        super().__init__(profile)
        headers = {}
        token = os.environ.get(profile.api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self.client = httpx.Client(base_url=profile.base_url, headers=headers, timeout=profile.timeout,
                                   transport=transport)
        self._slots = threading.BoundedSemaphore(profile.max_parallel)
        self._sleep = sleep
        self.attempts = 0

    def close(self) -> None:
        self.client.close()

    def _post(self, path: str, payload: dict) -> dict:
        p = self.profile
        last: Exception | None = None
        for attempt in range(1, p.max_attempts + 1):
            self.attempts = attempt
            try:
                with self._slots:
                    resp = self.client.post(path, json=payload)
            except httpx.TimeoutException as exc:
                last = GatewayTimeout(f"{path} timed out after {p.timeout}s")
                last.__cause__ = exc
            except httpx.HTTPError as exc:
                raise GatewayError(f"{path}: {exc}") from exc
            else:
                if resp.status_code in self.RETRY_STATUS:
                    cls = RateLimited if resp.status_code == 429 else GatewayError
                    last = cls(f"{path} returned HTTP {resp.status_code}")
                elif resp.status_code >= 400:
                    raise GatewayError(f"{path} returned HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise ProtocolError(f"{path} returned malformed JSON") from exc
            if attempt < p.max_attempts:
                delay = p.backoff_base * 2 ** (attempt - 1)
                log.info("retrying %s in %.2fs (%s)", path, delay, last)
                self._sleep(delay)
        assert last is not None
        raise last

    def _chat(self, messages, role, task, context):
        model = self.profile.models[role]
        body = self._post("/chat/completions", {"model": model, "messages": messages, "temperature": 0})
        try:
            return body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError("chat response lacks choices[0].message.content") from exc

    def _embed_batch(self, batch: list[str]) -> list[list[float]]:
        body = self._post("/embeddings", {"model": self.profile.models["embedding"], "input": batch})
        try:
            rows = sorted(body["data"], key=lambda r: r["index"])
            return [r["embedding"] for r in rows]
        except (KeyError, TypeError) as exc:
            raise ProtocolError("embedding response lacks data[].embedding") from exc

    def _embed(self, texts):
        size = self.profile.embed_batch_size
        batches = [texts[i:i + size] for i in range(0, len(texts), size)]
        if len(batches) == 1:
            results = [self._embed_batch(batches[0])]
        else:
            with ThreadPoolExecutor(self.profile.max_parallel) as pool:
                results = list(pool.map(self._embed_batch, batches))
        rows = [row for batch in results for row in batch]
        dims = {len(r) for r in rows}
        if len(dims) != 1:
            raise ProtocolError(f"embeddings have mixed dimensions {sorted(dims)}")
        return np.asarray(rows, dtype=float)

    def _rerank(self, query, passages):
        body = self._post(self.profile.rerank_path,
                          {"model": self.profile.models["reranker"], "query": query, "documents": passages})
        try:
            return list(body["scores"])
        except (KeyError, TypeError) as exc:
            raise ProtocolError("rerank response lacks scores[]") from exc


def make_gateway(profile: ProviderProfile, **kwargs) -> Gateway:
    if profile.kind == "stub":
        return StubGateway(profile)
    if profile.kind == "openai":
        return HTTPGateway(profile, **kwargs)
    raise ValueError(f"unknown provider kind {profile.kind!r}")

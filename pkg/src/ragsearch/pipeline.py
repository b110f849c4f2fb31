"""Executable RAG pipeline: one function per technique family.

Stage order for a question::

    query expansion -> retrieval (+ RRF over query lists) -> reranking
    -> passage filter -> augmentation -> compression -> prompt -> generation
    -> post-generation

The pre-embedding choice only selects which :class:`~ragsearch.corpus.IndexBundle`
is searched. Retrieval metrics are taken on the filtered list, before
augmentation adds unscored neighbours.
"""

from __future__ import annotations

import logging
import re
import threading
import time
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import templates
from .corpus import Corpus, IndexBundle, QAItem, build_indexes
from .gateway import Gateway
from .metrics import RetrievalJudgment
from .searchspace import NONE, PipelineConfig

log = logging.getLogger(__name__)

STAGES = (
    "pre_embedding",
    "query_expansion",
    "retrieval",
    "reranking",
    "passage_filter",
    "passage_augmentation",
    "passage_compression",
    "prompt_maker",
    "generation",
    "post_generation",
)


class MalformedPermutation(UserWarning):
    pass


class NoGraphRelations(UserWarning):
    pass


class PipelineFailure(RuntimeError):
    def __init__(self, question_id: str, stage: str, cause: BaseException):
        super().__init__(f"question {question_id!r} failed in stage {stage!r}: {cause!r}")
        self.question_id = question_id
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineParams:
    n_retrieve: int = 20
    m_expansions: int = 3
    top_k_filter: int = 5
    similarity_threshold: float = 0.7
    rrf_k: int = 60
    rse_decay: float = 0.5
    compression_batch: int = 4
    parent_discount: float = 0.9

    def __post_init__(self):
        for name in ("n_retrieve", "m_expansions", "top_k_filter", "rrf_k", "compression_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.similarity_threshold <= 1.0:
            raise ValueError("similarity_threshold must lie in [0, 1]")
        if self.compression_batch < 2:
            raise ValueError("compression_batch must be at least 2")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineParams":
        return cls(**d)


@dataclass(frozen=True)
class RankedPassage:
    chunk_id: str
    score: float
    rank: int
    stage: str


@dataclass(frozen=True)
class Passage:
    """Unit handed to the prompt: one chunk, a merged segment or a summary."""

    chunk_ids: tuple[str, ...]
    text: str
    score: float = 0.0


@dataclass(frozen=True)
class QueryRep:
    text: str
    embed_text: str


@dataclass
class StageRecord:
    stage: str
    technique: str
    n_in: int
    n_out: int
    ids: tuple[str, ...] = ()
    calls: dict[str, int] = field(default_factory=dict)
    seconds: float = field(default=0.0, compare=False)

    def to_dict(self, timings: bool = True) -> dict:
        d = {"stage": self.stage, "technique": self.technique, "n_in": self.n_in, "n_out": self.n_out,
             "ids": list(self.ids), "calls": dict(sorted(self.calls.items()))}
        if timings:
            d["seconds"] = self.seconds
        return d


@dataclass
class StageTrace:
    question_id: str
    records: list[StageRecord] = field(default_factory=list)

    @property
    def stages(self) -> list[str]:
        return [r.stage for r in self.records]

    def record(self, stage: str) -> StageRecord:
        return next(r for r in self.records if r.stage == stage)

    def total_calls(self) -> Counter[str]:
        total: Counter[str] = Counter()
        for r in self.records:
            total.update(r.calls)
        return total

    def to_dict(self, timings: bool = True) -> dict:
        return {"question_id": self.question_id, "stages": [r.to_dict(timings) for r in self.records]}


class _CallCounter:
    """Per-question proxy so that stage call counts stay exact under threads."""

    def __init__(self, gateway: Gateway):
        self.gateway = gateway
        self.calls: Counter[str] = Counter()

    def chat(self, messages, **kw):
        self.calls[f"chat:{kw.get('task', 'generate')}"] += 1
        return self.gateway.chat(messages, **kw)

    def embed(self, texts, **kw):
        self.calls["embed"] += 1
        return self.gateway.embed(texts, **kw)

    def rerank_score(self, query, passages):
        self.calls["rerank"] += 1
        return self.gateway.rerank_score(query, passages)


def rank_scores(scored: Iterable[tuple[str, float]], stage: str) -> list[RankedPassage]:
    """Sort by descending score, ties by chunk id, and number from 1."""
    ordered = sorted(scored, key=lambda x: (-x[1], x[0]))
    return [RankedPassage(cid, float(s), i, stage) for i, (cid, s) in enumerate(ordered, start=1)]


def _positional(ids: Sequence[str], stage: str) -> list[RankedPassage]:
    n = len(ids)
    return [RankedPassage(cid, (n - i) / n, i + 1, stage) for i, cid in enumerate(ids)]


def _lines(text: str) -> list[str]:
    out = []
    for line in text.splitlines():
        line = re.sub(r"^\s*(?:\d+[.)]|[-*•])\s*", "", line).strip()
        if line:
            out.append(line)
    return out


def _ask(gateway, task: str, ctx: dict, role: str = "generator", **fields) -> str:
    prompt = templates.render(task, **fields)
    return gateway.chat([{"role": "user", "content": prompt}], role=role, task=task, context=ctx)


# -- query expansion -----------------------------------------------------------


def expand_query(question: str, technique: str, gateway, graph=None,
                 params: PipelineParams | None = None) -> list[QueryRep]:
    params = params or PipelineParams()
    m = params.m_expansions
    base = QueryRep(question, question)
    if technique == NONE:
        return [base]
    ctx = {"question": question, "n": m}
    if technique in ("multi_query", "rag_fusion", "decomposition"):
        variants = _lines(_ask(gateway, technique, ctx, question=question, n=m))[:m]
        return [base, *(QueryRep(v, v) for v in variants)]
    if technique == "step_back":
        abstract = _ask(gateway, "step_back", ctx, question=question).strip()
        return [base, QueryRep(abstract, abstract)]
    if technique == "query_rewriting":
        rewritten = _ask(gateway, "query_rewriting", ctx, question=question).strip()
        return [QueryRep(rewritten, rewritten)]
    if technique == "hyde":
        hypothetical = _ask(gateway, "hyde", ctx, question=question).strip()
        return [QueryRep(question, hypothetical)]
    if technique == "graph_expansion":
        phrases = graph.relation_phrases(question, m) if graph is not None else []
        if not phrases:
            warnings.warn("graph expansion matched no related entities; using the question alone",
                          NoGraphRelations, stacklevel=2)
        return [base, *(QueryRep(p, p) for p in phrases)]
    raise ValueError(f"unknown query expansion {technique!r}")


# -- retrieval -----------------------------------------------------------------


def rrf_fuse(lists: Sequence[Sequence[RankedPassage]], rrf_k: int = 60, stage: str = "fusion") -> list[RankedPassage]:
    scores: dict[str, float] = {}
    for lst in lists:
        for p in lst:
            scores[p.chunk_id] = scores.get(p.chunk_id, 0.0) + 1.0 / (rrf_k + p.rank)
    return rank_scores(scores.items(), stage)


def _expand_parents(ranked: list[RankedPassage], parents: dict, discount: float) -> list[RankedPassage]:
    hits = {p.chunk_id: p.score for p in ranked}
    scores = dict(hits)
    for p in ranked:
        for sib in parents.get(p.chunk_id, ()):
            if sib in hits:
                continue
            s = discount * p.score
            if sib not in scores or s > scores[sib]:
                scores[sib] = s
    return rank_scores(scores.items(), ranked[0].stage if ranked else "retrieval")


def retrieve(queries: Sequence[QueryRep], technique: str, bundle: IndexBundle, gateway,
             params: PipelineParams | None = None) -> list[list[RankedPassage]]:
    params = params or PipelineParams()
    n, k = params.n_retrieve, params.rrf_k
    need_vectors = technique in ("vector", "hybrid", "complete_hybrid")
    qvecs = gateway.embed([q.embed_text for q in queries], role="query") if need_vectors else None
    out = []
    for i, q in enumerate(queries):
        per_mode = {}
        if need_vectors:
            per_mode["vector"] = rank_scores(bundle.vectors.search(qvecs[i], n), "vector")
        if technique in ("bm25", "hybrid", "complete_hybrid"):
            per_mode["bm25"] = rank_scores(bundle.bm25.search(q.text, n), "bm25")
        if technique in ("graph", "complete_hybrid"):
            per_mode["graph"] = rank_scores(bundle.graph.search(q.text, n), "graph")
        if not per_mode:
            raise ValueError(f"unknown retrieval {technique!r}")
        if len(per_mode) == 1:
            ranked = next(iter(per_mode.values()))
        else:
            ranked = rrf_fuse(list(per_mode.values()), k, stage=technique)
        if bundle.parents:
            ranked = _expand_parents(ranked, bundle.parents, params.parent_discount)
        out.append(ranked[:n])
    return out


# -- reranking -----------------------------------------------------------------


def _parse_permutation(reply: str, ids: Sequence[str]) -> list[str]:
    known = set(ids)
    seen: list[str] = []
    for tok in re.split(r"[\s,;>]+", reply):
        tok = tok.strip("[]()'\".")
        if tok in known and tok not in seen:
            seen.append(tok)
    return seen


def _llm_order(question: str, ids: Sequence[str], corpus: Corpus, gateway) -> list[str]:
    cands = [(cid, corpus[cid].text) for cid in ids]
    block = "\n".join(f"[{cid}] {text}" for cid, text in cands)
    reply = _ask(gateway, "llm_rerank", {"question": question, "candidates": cands},
                 question=question, passages=block)
    order = _parse_permutation(reply, ids)
    if not order:
        raise _Malformed(reply)
    return order + [cid for cid in ids if cid not in order]


class _Malformed(Exception):
    pass


def _cross_encoder(question: str, ids: Sequence[str], corpus: Corpus, gateway) -> list[RankedPassage]:
    scores = gateway.rerank_score(question, [corpus[cid].text for cid in ids])
    return rank_scores(zip(ids, scores), "cross_encoder")


def rerank(question: str, candidates: Sequence[RankedPassage], technique: str, gateway,
           corpus: Corpus) -> list[RankedPassage]:
    ids = [p.chunk_id for p in candidates]
    if technique == NONE or not ids:
        return list(candidates)
    if technique == "cross_encoder":
        return _cross_encoder(question, ids, corpus, gateway)
    if technique == "llm_rerank":
        try:
            return _positional(_llm_order(question, ids, corpus, gateway), "llm_rerank")
        except _Malformed as exc:
            warnings.warn(f"LLM rerank reply held no candidate ids ({str(exc)[:60]!r}); "
                          "using cross-encoder order", MalformedPermutation)
            return _cross_encoder(question, ids, corpus, gateway)
    if technique == "hybrid_rerank":
        ce = [p.chunk_id for p in _cross_encoder(question, ids, corpus, gateway)]
        half = (len(ce) + 1) // 2
        head, tail = ce[:half], ce[half:]
        try:
            head = _llm_order(question, head, corpus, gateway)
        except _Malformed:
            warnings.warn("LLM stage of hybrid rerank unreadable; keeping cross-encoder order",
                          MalformedPermutation)
        return _positional(head + tail, "hybrid_rerank")
    raise ValueError(f"unknown reranking {technique!r}")


# -- filter / augmentation / compression -----------------------------------------


def normalized_scores(ranked: Sequence[RankedPassage]) -> list[float]:
    scores = [p.score for p in ranked]
    lo, hi = min(scores), max(scores)
    if hi == lo:
        return [1.0] * len(scores)
    return [(s - lo) / (hi - lo) for s in scores]


def filter_passages(ranked: Sequence[RankedPassage], technique: str,
                    params: PipelineParams | None = None) -> list[RankedPassage]:
    params = params or PipelineParams()
    if not ranked:
        return []
    if technique == "simple_threshold":
        return list(ranked[:params.top_k_filter])
    if technique == "similarity_threshold":
        norm = normalized_scores(ranked)
        kept = [p for p, s in zip(ranked, norm) if s >= params.similarity_threshold]
        return kept or [ranked[0]]
    raise ValueError(f"unknown passage filter {technique!r}")


def augment_passages(kept: Sequence[RankedPassage], technique: str, corpus: Corpus,
                     scores: dict[str, float] | None = None,
                     params: PipelineParams | None = None) -> list[Passage]:
    params = params or PipelineParams()
    scores = scores if scores is not None else {p.chunk_id: p.score for p in kept}
    if technique == NONE:
        return [Passage((p.chunk_id,), corpus[p.chunk_id].text, p.score) for p in kept]
    if technique == "prev_next":
        out, seen = [], set()
        for p in kept:
            hood = [corpus.neighbour(p.chunk_id, -1), corpus[p.chunk_id], corpus.neighbour(p.chunk_id, 1)]
            for c in hood:
                if c is not None and c.chunk_id not in seen:
                    seen.add(c.chunk_id)
                    out.append(Passage((c.chunk_id,), c.text, scores.get(c.chunk_id, 0.0)))
        return out
    if technique == "relevant_segment_extraction":
        return _segments(kept, corpus, scores, params.rse_decay)
    raise ValueError(f"unknown passage augmentation {technique!r}")


def _segments(kept: Sequence[RankedPassage], corpus: Corpus, scores: dict[str, float],
              decay: float) -> list[Passage]:
    seed_rank = {p.chunk_id: p.rank for p in kept}
    by_doc: dict[str, list[int]] = {}
    for p in kept:
        by_doc.setdefault(corpus[p.chunk_id].doc_id, []).append(corpus.position[p.chunk_id])
    segments: list[tuple[str, list[int]]] = []
    for doc_id, positions in by_doc.items():
        ids = corpus.docs[doc_id]
        runs: list[list[int]] = []
        for pos in sorted(positions):
            if runs and pos == runs[-1][-1] + 1:
                runs[-1].append(pos)
            else:
                runs.append([pos])

        def peak(run):
            return max(scores.get(ids[i], 0.0) for i in run if ids[i] in seed_rank)

        merged = [runs[0]]
        for run in runs[1:]:
            prev = merged[-1]
            if run[0] == prev[-1] + 2:
                gap = ids[prev[-1] + 1]
                top = max(peak(prev), peak(run))
                if top > 0 and scores.get(gap, 0.0) >= decay * top:
                    prev.extend([prev[-1] + 1, *run])
                    continue
            merged.append(run)
        segments.extend((doc_id, run) for run in merged)

    passages = []
    for doc_id, run in segments:
        ids = [corpus.docs[doc_id][i] for i in run]
        seeds = [cid for cid in ids if cid in seed_rank]
        best = min(seeds, key=lambda c: seed_rank[c])
        passages.append((seed_rank[best], Passage(tuple(ids), "\n".join(corpus[c].text for c in ids),
                                                   max(scores.get(c, 0.0) for c in seeds))))
    return [p for _, p in sorted(passages, key=lambda x: x[0])]


def compress_passages(question: str, passages: Sequence[Passage], technique: str, gateway,
                      batch: int = 4) -> list[Passage]:
    if technique == NONE or not passages:
        return list(passages)
    ids = tuple(dict.fromkeys(cid for p in passages for cid in p.chunk_ids))
    top = max(p.score for p in passages)
    if technique == "tree_summarize":
        level = [p.text for p in passages]
        while True:
            groups = [level[i:i + batch] for i in range(0, len(level), batch)]
            level = [
                _ask(gateway, "tree_summarize", {"question": question, "passages": g},
                     question=question, passages="\n\n".join(g)).strip()
                for g in groups
            ]
            if len(level) == 1:
                return [Passage(ids, level[0], top)]
    if technique == "llm_refine":
        first = passages[0].text
        draft = _ask(gateway, "llm_refine_draft", {"question": question, "passage": first},
                     question=question, passage=first).strip()
        for p in passages[1:]:
            draft = _ask(gateway, "llm_refine_step", {"question": question, "draft": draft, "passage": p.text},
                         question=question, draft=draft, passage=p.text).strip()
        return [Passage(ids, draft, top)]
    raise ValueError(f"unknown passage compression {technique!r}")


# -- prompt / generation -------------------------------------------------------


def reorder_long_context(items: Sequence) -> list:
    """Rank order 1..n laid out as 1, 3, 5, ..., 6, 4, 2."""
    return list(items[0::2]) + list(items[1::2])[::-1]


def layout(passages: Sequence[Passage], technique: str) -> list[Passage]:
    if technique == "simple_listing":
        return list(passages)
    if technique == "long_context_reorder":
        return reorder_long_context(passages)
    raise ValueError(f"unknown prompt maker {technique!r}")


def render_passages(passages: Sequence[Passage]) -> str:
    if not passages:
        return "(no passages retrieved)"
    return "\n\n".join(f"[{i}] {p.text}" for i, p in enumerate(passages, start=1))


def make_prompt(question: str, passages: Sequence[Passage], technique: str) -> str:
    return templates.render("answer", passages=render_passages(layout(passages, technique)), question=question)


def generate(prompt: str, gateway, question: str = "", passages: Sequence[Passage] = ()) -> str:
    ctx = {"question": question, "passages": [p.text for p in passages]}
    return gateway.chat([{"role": "user", "content": prompt}], role="generator", task="generate",
                        context=ctx).strip()


def post_generate(question: str, answer: str, passages: Sequence[Passage], technique: str, gateway) -> str:
    if technique == NONE:
        return answer
    if technique == "reflection_revising":
        context = render_passages(passages)
        ctx = {"question": question, "answer": answer, "passages": [p.text for p in passages]}
        critique = _ask(gateway, "critique", ctx, question=question, answer=answer, context=context).strip()
        ctx = {**ctx, "critique": critique}
        return _ask(gateway, "revise", ctx, question=question, answer=answer, context=context,
                    critique=critique).strip()
    raise ValueError(f"unknown post-generation {technique!r}")


# -- orchestration -------------------------------------------------------------


def run_pipeline(qa: QAItem, config: PipelineConfig, bundle: IndexBundle, corpus: Corpus, gateway: Gateway,
                 params: PipelineParams | None = None) -> tuple[RetrievalJudgment, str, StageTrace]:
    if bundle.variant != config.pre_embedding:
        raise ValueError(f"indexes are for {bundle.variant!r}, config wants {config.pre_embedding!r}")
    params = params or PipelineParams()
    gw = _CallCounter(gateway)
    trace = StageTrace(qa.question_id)
    q = qa.question

    def stage(name: str, technique: str, n_in: int, fn):
        before = Counter(gw.calls)
        start = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            raise PipelineFailure(qa.question_id, name, exc) from exc
        items = result if isinstance(result, list) else [result]
        ids = tuple(getattr(x, "chunk_id", None) or "+".join(getattr(x, "chunk_ids", ())) for x in items
                    if isinstance(x, (RankedPassage, Passage)))
        trace.records.append(StageRecord(name, technique, n_in, len(items), ids,
                                         dict(gw.calls - before), time.perf_counter() - start))
        return result

    stage("pre_embedding", config.pre_embedding, len(corpus), lambda: [])
    trace.records[-1].n_out = len(bundle.vectors.owners)

    queries = stage("query_expansion", config.query_expansion, 1,
                    lambda: expand_query(q, config.query_expansion, gw, bundle.graph, params))

    def _retrieve():
        lists = retrieve(queries, config.retrieval, bundle, gw, params)
        if len(lists) == 1:
            return lists[0]
        return rrf_fuse(lists, params.rrf_k, stage="query_fusion")[:params.n_retrieve]

    candidates = stage("retrieval", config.retrieval, len(queries), _retrieve)
    reranked = stage("reranking", config.reranking, len(candidates),
                     lambda: rerank(q, candidates, config.reranking, gw, corpus))
    kept = stage("passage_filter", config.passage_filter, len(reranked),
                 lambda: filter_passages(reranked, config.passage_filter, params))
    judgment = RetrievalJudgment(tuple(p.chunk_id for p in kept), qa.gold_chunk_ids)

    scores = {p.chunk_id: p.score for p in reranked}
    passages = stage("passage_augmentation", config.passage_augmentation, len(kept),
                     lambda: augment_passages(kept, config.passage_augmentation, corpus, scores, params))
    passages = stage("passage_compression", config.passage_compression, len(passages),
                     lambda: compress_passages(q, passages, config.passage_compression, gw,
                                               params.compression_batch))
    ordered = layout(passages, config.prompt_maker)
    prompt = stage("prompt_maker", config.prompt_maker, len(passages),
                   lambda: make_prompt(q, passages, config.prompt_maker))
    draft = stage("generation", "chat", 1, lambda: generate(prompt, gw, q, ordered))
    answer = stage("post_generation", config.post_generation, 1,
                   lambda: post_generate(q, draft, ordered, config.post_generation, gw))
    return judgment, answer, trace


class PipelineRunner:
    """Runs decoded configurations over one corpus, building each
    pre-embedding variant's indexes once."""

    def __init__(self, corpus: Corpus, gateway: Gateway, params: PipelineParams | None = None,
                 index_cache: str | None = None):
        self.corpus = corpus
        self.gateway = gateway
        self.params = params or PipelineParams()
        self.index_cache = index_cache
        self._bundles: dict[str, IndexBundle] = {}
        self._lock = threading.Lock()

    def indexes(self, variant: str) -> IndexBundle:
        with self._lock:
            if variant not in self._bundles:
                self._bundles[variant] = build_indexes(self.corpus, variant, self.gateway, self.index_cache)
            return self._bundles[variant]

    def run(self, qa: QAItem, config: PipelineConfig) -> tuple[RetrievalJudgment, str, StageTrace]:
        return run_pipeline(qa, config, self.indexes(config.pre_embedding), self.corpus, self.gateway,
                            self.params)

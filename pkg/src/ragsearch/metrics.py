"""Binary-relevance ranking metrics and the retrieval/generation scalarization.

All kernels take the ranked chunk ids (best first) and the set of gold ids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Collection, Sequence

RETRIEVAL_METRICS = ("recall", "map", "ndcg", "mrr")
GENERATION_METRICS = ("llm", "semantic")


class EmptyGold(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalJudgment:
    ranked: tuple[str, ...]
    gold: frozenset[str]

    def __post_init__(self):
        if not self.gold:
            raise EmptyGold("gold chunk set is empty")
        if len(set(self.ranked)) != len(self.ranked):
            raise ValueError("ranked list contains duplicate ids")


@dataclass(frozen=True)
class GenerationJudgment:
    llm_judge_score: float
    semantic_score: float


def _gold(gold: Collection[str]) -> frozenset[str]:
    gold = frozenset(gold)
    if not gold:
        raise EmptyGold("gold chunk set is empty")
    return gold


def recall_at_k(ranked: Sequence[str], gold: Collection[str], k: int = 5) -> float:
    gold = _gold(gold)
    return len(gold.intersection(ranked[:k])) / len(gold)


def mean_average_precision(ranked: Sequence[str], gold: Collection[str]) -> float:
    """Average precision of one ranking; unretrieved gold items add zero."""
    gold = _gold(gold)
    hits, total = 0, 0.0
    for rank, cid in enumerate(ranked, start=1):
        if cid in gold:
            hits += 1
            total += hits / rank
    return total / len(gold)


def ndcg_at_k(ranked: Sequence[str], gold: Collection[str], k: int = 5) -> float:
    gold = _gold(gold)
    dcg = sum(1.0 / math.log2(rank + 1) for rank, cid in enumerate(ranked[:k], start=1) if cid in gold)
    idcg = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(len(gold), k) + 1))
    return dcg / idcg


def mrr(ranked: Sequence[str], gold: Collection[str]) -> float:
    gold = _gold(gold)
    for rank, cid in enumerate(ranked, start=1):
        if cid in gold:
            return 1.0 / rank
    return 0.0


def retrieval_metrics(j: RetrievalJudgment, k: int = 5) -> dict[str, float]:
    return {
        "recall": recall_at_k(j.ranked, j.gold, k),
        "map": mean_average_precision(j.ranked, j.gold),
        "ndcg": ndcg_at_k(j.ranked, j.gold, k),
        "mrr": mrr(j.ranked, j.gold),
    }


@dataclass(frozen=True)
class Scores:
    retrieval: float
    generation: float
    overall: float


def scalarize(retrieval: Sequence[float], generation: Sequence[float]) -> Scores:
    """Equal-weight means: four retrieval metrics, two generation metrics, then
    the mean of the two sub-scores."""
    if len(retrieval) != 4 or len(generation) != 2:
        raise ValueError("expected (recall, map, ndcg, mrr) and (llm, semantic)")
    r = sum(retrieval) / 4.0
    g = sum(generation) / 2.0
    return Scores(r, g, (r + g) / 2.0)

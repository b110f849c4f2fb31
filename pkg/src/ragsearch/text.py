"""Tokenization and small text helpers shared by the indexes and the stubs."""

from __future__ import annotations

import re
from collections import Counter

_WORD = re.compile(r"[^\W_]+")
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def tokenize(text: str) -> list[str]:
    """Lowercased Unicode alphanumeric runs; no stemming, no stopwords."""
    return _WORD.findall(text.lower())


def sentences(text: str) -> list[str]:
    parts = [s.strip() for s in _SENTENCE_END.split(text.strip())]
    return [s for s in parts if s]


def first_sentence(text: str) -> str:
    parts = sentences(text)
    return parts[0] if parts else text.strip()


def token_f1(reference: str, candidate: str) -> float:
    ref, cand = Counter(tokenize(reference)), Counter(tokenize(candidate))
    if not ref and not cand:
        return 1.0
    common = sum((ref & cand).values())
    if common == 0:
        return 0.0
    precision = common / sum(cand.values())
    recall = common / sum(ref.values())
    return 2 * precision * recall / (precision + recall)


def overlap(query: str, passage: str) -> float:
    """Share of distinct query tokens that also occur in the passage."""
    q = set(tokenize(query))
    if not q:
        return 0.0
    return len(q & set(tokenize(passage))) / len(q)

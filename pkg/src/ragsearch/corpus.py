"""Chunked corpora, QA sets and the three retrieval indexes.

Corpora arrive pre-chunked as JSON lines. For each pre-embedding variant an
:class:`IndexBundle` holds a BM25 inverted index, an exact-search vector
store and an entity co-occurrence graph. Bundles can be cached on disk under
``<root>/<corpus-hash>/<variant>/<embedding-profile>/``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import templates
from .gateway import Gateway
from .text import tokenize

log = logging.getLogger(__name__)

QTYPES = ("factual", "interpretation", "long-answer")
BM25_K1 = 1.2
BM25_B = 0.75
HYPE_QUESTIONS = 3


class CorpusError(ValueError):
    pass


class SchemaError(CorpusError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DanglingGoldChunk(CorpusError):
    def __init__(self, question_id: str, chunk_ids: Iterable[str]):
        super().__init__(f"question {question_id!r} cites unknown chunks {sorted(chunk_ids)}")
        self.question_id = question_id


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    chunk_id: str
    text: str
    prev_chunk_id: str | None = None
    next_chunk_id: str | None = None
    section_path: tuple[str, ...] = ()
    token_count: int = 0


@dataclass(frozen=True)
class QAItem:
    question_id: str
    question: str
    qtype: str
    gold_answer: str
    gold_chunk_ids: frozenset[str]


class Corpus:
    """Chunks in document order with id lookup and per-document positions."""

    def __init__(self, chunks: Sequence[Chunk]):
        if not chunks:
            raise CorpusError("corpus is empty")
        self.by_id: dict[str, Chunk] = {}
        for c in chunks:
            if c.chunk_id in self.by_id:
                raise CorpusError(f"duplicate chunk id {c.chunk_id!r}")
            self.by_id[c.chunk_id] = c
        self.docs: dict[str, list[str]] = self._order_documents(chunks)
        self.chunks: list[Chunk] = [self.by_id[cid] for ids in self.docs.values() for cid in ids]
        self.position = {cid: i for ids in self.docs.values() for i, cid in enumerate(ids)}

    def _order_documents(self, chunks: Sequence[Chunk]) -> dict[str, list[str]]:
        by_doc: dict[str, list[Chunk]] = defaultdict(list)
        for c in chunks:
            by_doc[c.doc_id].append(c)
        docs = {}
        for doc_id, members in by_doc.items():
            for c in members:
                for link, back in ((c.next_chunk_id, "prev_chunk_id"), (c.prev_chunk_id, "next_chunk_id")):
                    if link is None:
                        continue
                    other = self.by_id.get(link)
                    if other is None or other.doc_id != doc_id:
                        raise CorpusError(f"chunk {c.chunk_id!r} links outside its document to {link!r}")
                    if getattr(other, back) != c.chunk_id:
                        raise CorpusError(f"asymmetric link between {c.chunk_id!r} and {link!r}")
            heads = [c for c in members if c.prev_chunk_id is None]
            if len(heads) != 1:
                raise CorpusError(f"document {doc_id!r} has {len(heads)} chains, expected 1")
            order, cur = [], heads[0]
            while cur is not None:
                order.append(cur.chunk_id)
                cur = self.by_id[cur.next_chunk_id] if cur.next_chunk_id else None
            if len(order) != len(members):
                raise CorpusError(f"document {doc_id!r} prev/next chain does not cover all chunks")
            docs[doc_id] = order
        return docs

    def __len__(self) -> int:
        return len(self.chunks)

    def __getitem__(self, chunk_id: str) -> Chunk:
        return self.by_id[chunk_id]

    @property
    def ids(self) -> list[str]:
        return [c.chunk_id for c in self.chunks]

    def neighbour(self, chunk_id: str, offset: int) -> Chunk | None:
        c = self.by_id[chunk_id]
        ids = self.docs[c.doc_id]
        j = self.position[chunk_id] + offset
        return self.by_id[ids[j]] if 0 <= j < len(ids) else None

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for c in self.chunks:
            h.update(json.dumps(asdict(c), sort_keys=True, ensure_ascii=False).encode())
            h.update(b"\n")
        return h.hexdigest()


@dataclass
class Dataset:
    corpus: Corpus
    questions: list[QAItem]
    name: str = "dataset"

    def __post_init__(self):
        known = self.corpus.by_id
        for q in self.questions:
            missing = q.gold_chunk_ids - known.keys()
            if missing:
                raise DanglingGoldChunk(q.question_id, missing)

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.corpus.fingerprint().encode())
        for q in self.questions:
            row = {**asdict(q), "gold_chunk_ids": sorted(q.gold_chunk_ids)}
            h.update(json.dumps(row, sort_keys=True, ensure_ascii=False).encode())
        return h.hexdigest()


def _read_jsonl(path: str | os.PathLike) -> list[tuple[int, dict]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise SchemaError(lineno, "expected a JSON object")
            rows.append((lineno, obj))
    if not rows:
        raise SchemaError(0, f"{path} contains no records")
    return rows


def _require(obj: dict, lineno: int, key: str, kind):
    if key not in obj:
        raise SchemaError(lineno, f"missing field {key!r}")
    if not isinstance(obj[key], kind):
        raise SchemaError(lineno, f"field {key!r} has wrong type")
    return obj[key]


def load_corpus(path: str | os.PathLike) -> Corpus:
    chunks = []
    for lineno, obj in _read_jsonl(path):
        text = _require(obj, lineno, "text", str)
        section = obj.get("section_path") or []
        if not isinstance(section, list) or not all(isinstance(s, str) for s in section):
            raise SchemaError(lineno, "section_path must be a list of strings")
        chunks.append(Chunk(
            doc_id=_require(obj, lineno, "doc_id", str),
            chunk_id=_require(obj, lineno, "chunk_id", str),
            text=text,
            prev_chunk_id=obj.get("prev_chunk_id"),
            next_chunk_id=obj.get("next_chunk_id"),
            section_path=tuple(section),
            token_count=int(obj.get("token_count") or len(tokenize(text))),
        ))
    return Corpus(chunks)


def load_qa(path: str | os.PathLike, corpus: Corpus | None = None) -> list[QAItem]:
    items = []
    for lineno, obj in _read_jsonl(path):
        qtype = _require(obj, lineno, "qtype", str)
        if qtype not in QTYPES:
            raise SchemaError(lineno, f"qtype must be one of {QTYPES}")
        gold = _require(obj, lineno, "gold_chunk_ids", list)
        if not gold:
            raise SchemaError(lineno, "gold_chunk_ids is empty")
        item = QAItem(
            question_id=_require(obj, lineno, "question_id", str),
            question=_require(obj, lineno, "question", str),
            qtype=qtype,
            gold_answer=_require(obj, lineno, "gold_answer", str),
            gold_chunk_ids=frozenset(gold),
        )
        if corpus is not None and not item.gold_chunk_ids <= corpus.by_id.keys():
            raise DanglingGoldChunk(item.question_id, item.gold_chunk_ids - corpus.by_id.keys())
        items.append(item)
    return items


def load_dataset(corpus_path, qa_path, name: str | None = None) -> Dataset:
    corpus = load_corpus(corpus_path)
    return Dataset(corpus, load_qa(qa_path, corpus), name or Path(corpus_path).stem)


# -- BM25 ----------------------------------------------------------------------


class BM25Index:
    """Okapi BM25 with the non-negative ``log(1 + (N - df + .5)/(df + .5))`` idf."""

    def __init__(self, postings: dict[str, list[tuple[str, int]]], doc_len: dict[str, int],
                 k1: float = BM25_K1, b: float = BM25_B):
        self.postings = postings
        self.doc_len = doc_len
        self.k1 = k1
        self.b = b
        self.n_docs = len(doc_len)
        self.avgdl = sum(doc_len.values()) / self.n_docs if self.n_docs else 0.0
        self._tf = {term: dict(plist) for term, plist in postings.items()}

    @classmethod
    def build(cls, texts: dict[str, str], **kw) -> "BM25Index":
        postings: dict[str, list[tuple[str, int]]] = defaultdict(list)
        doc_len = {}
        for cid, text in texts.items():
            toks = tokenize(text)
            doc_len[cid] = len(toks)
            for term, tf in sorted(Counter(toks).items()):
                postings[term].append((cid, tf))
        return cls(dict(postings), doc_len, **kw)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def score(self, query_terms: Sequence[str], chunk_id: str) -> float:
        dl = self.doc_len[chunk_id]
        norm = self.k1 * (1 - self.b + self.b * dl / self.avgdl) if self.avgdl else self.k1
        total = 0.0
        for term in query_terms:
            tf = self._tf.get(term, {}).get(chunk_id, 0)
            if tf:
                total += self.idf(term) * tf * (self.k1 + 1) / (tf + norm)
        return total

    def search(self, query: str, n: int) -> list[tuple[str, float]]:
        terms = tokenize(query)
        candidates = {cid for t in set(terms) for cid, _ in self.postings.get(t, ())}
        scored = [(cid, self.score(terms, cid)) for cid in candidates]
        scored = [(cid, s) for cid, s in scored if s > 0]
        scored.sort(key=lambda x: (-x[1], x[0]))
        return scored[:n]

    def to_dict(self) -> dict:
        return {"k1": self.k1, "b": self.b, "doc_len": self.doc_len,
                "postings": {t: [list(p) for p in plist] for t, plist in self.postings.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "BM25Index":
        postings = {t: [(cid, int(tf)) for cid, tf in plist] for t, plist in d["postings"].items()}
        return cls(postings, {k: int(v) for k, v in d["doc_len"].items()}, d["k1"], d["b"])


# -- vectors -------------------------------------------------------------------


class VectorStore:
    """Exact cosine search. Rows are unit vectors; ``owners[i]`` is the chunk a
    row belongs to (several rows per chunk for question-level indexes, where a
    chunk scores the max over its rows)."""

    def __init__(self, owners: Sequence[str], matrix: np.ndarray):
        self.owners = list(owners)
        self.matrix = np.asarray(matrix, dtype=float)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.owners):
            raise CorpusError("vector store rows do not match owners")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def vector(self, chunk_id: str) -> np.ndarray:
        return self.matrix[self.owners.index(chunk_id)]

    def search(self, query_vec: np.ndarray, n: int) -> list[tuple[str, float]]:
        sims = self.matrix @ np.asarray(query_vec, dtype=float)
        best: dict[str, float] = {}
        for owner, s in zip(self.owners, sims.tolist()):
            if owner not in best or s > best[owner]:
                best[owner] = s
        ranked = sorted(best.items(), key=lambda x: (-x[1], x[0]))
        return ranked[:n]

    def write(self, directory: Path) -> None:
        (directory / "vector_owners.json").write_text(json.dumps(self.owners))
        with open(directory / "embeddings.txt", "w", encoding="utf-8") as fh:
            for row in self.matrix:
                fh.write(" ".join(repr(float(x)) for x in row) + "\n")

    @classmethod
    def read(cls, directory: Path) -> "VectorStore":
        owners = json.loads((directory / "vector_owners.json").read_text())
        with open(directory / "embeddings.txt", encoding="utf-8") as fh:
            rows = [[float(x) for x in line.split()] for line in fh if line.strip()]
        return cls(owners, np.asarray(rows))


# -- entity graph --------------------------------------------------------------

_WORD_SPAN = re.compile(r"[^\W_]+(?:['’-][^\W_]+)*")
_YEAR = re.compile(r"^\d{4}$")


def extract_entities(text: str) -> list[str]:
    """Maximal runs of capitalised words (at least 4 characters in total) and
    standalone 4-digit numbers, in order of first appearance."""
    found: list[str] = []
    run: list[str] = []
    last_end = 0

    def flush():
        if run:
            phrase = " ".join(run)
            if len(phrase) >= 4 and phrase not in found:
                found.append(phrase)
            run.clear()

    for m in _WORD_SPAN.finditer(text):
        word = m.group()
        gap = text[last_end:m.start()]
        if run and gap.strip():
            flush()
        if _YEAR.match(word):
            flush()
            if word not in found:
                found.append(word)
        elif word[0].isupper():
            run.append(word)
        else:
            flush()
        last_end = m.end()
    flush()
    return found


@dataclass
class GraphIndex:
    """Entities as nodes, edge weight = number of chunks mentioning both."""

    postings: dict[str, list[str]] = field(default_factory=dict)
    edges: dict[tuple[str, str], int] = field(default_factory=dict)
    n_chunks: int = 0

    @property
    def entities(self) -> list[str]:
        return sorted(self.postings)

    def neighbours(self, entity: str) -> list[tuple[str, int]]:
        out = [(b if a == entity else a, w) for (a, b), w in self.edges.items() if entity in (a, b)]
        return sorted(out, key=lambda x: (-x[1], x[0]))

    def match(self, query: str) -> list[str]:
        """Entities whose every token occurs in the query."""
        qt = set(tokenize(query))
        return [e for e in self.entities if set(tokenize(e)) <= qt and tokenize(e)]

    def weight(self, entity: str) -> float:
        df = len(self.postings.get(entity, ()))
        return math.log(1.0 + self.n_chunks / df) if df else 0.0

    def search(self, query: str, n: int) -> list[tuple[str, float]]:
        scores: dict[str, float] = defaultdict(float)
        for e in self.match(query):
            w = self.weight(e)
            for cid in self.postings[e]:
                scores[cid] += w
        ranked = sorted(scores.items(), key=lambda x: (-x[1], x[0]))
        return ranked[:n]

    def relation_phrases(self, query: str, m: int) -> list[str]:
        rel = []
        for e in self.match(query):
            rel.extend((w, e, nb) for nb, w in self.neighbours(e))
        rel.sort(key=lambda x: (-x[0], x[1], x[2]))
        phrases = []
        for _, e, nb in rel:
            phrase = f"{e} {nb}"
            if phrase not in phrases:
                phrases.append(phrase)
            if len(phrases) == m:
                break
        return phrases

    def edge_list(self) -> list[tuple[str, str, int]]:
        return sorted((a, b, w) for (a, b), w in self.edges.items())

    def to_dict(self) -> dict:
        return {"n_chunks": self.n_chunks, "postings": self.postings,
                "edges": [list(e) for e in self.edge_list()]}

    @classmethod
    def from_dict(cls, d: dict) -> "GraphIndex":
        return cls(d["postings"], {(a, b): int(w) for a, b, w in d["edges"]}, d["n_chunks"])


def build_graph(corpus: Corpus) -> GraphIndex:
    postings: dict[str, list[str]] = defaultdict(list)
    edges: Counter[tuple[str, str]] = Counter()
    for c in corpus.chunks:
        ents = sorted(set(extract_entities(c.text)))
        for e in ents:
            postings[e].append(c.chunk_id)
        for a, b in combinations(ents, 2):
            edges[(a, b)] += 1
    return GraphIndex(dict(postings), dict(edges), len(corpus))


# -- bundles -------------------------------------------------------------------


def index_text(chunk: Chunk, variant: str) -> str:
    if variant == "contextual_chunk_headers":
        return " > ".join(chunk.section_path) + "\n" + chunk.text
    return chunk.text


def parent_table(corpus: Corpus) -> dict[str, tuple[str, ...]]:
    """Each chunk's same-document, same-section siblings, in document order."""
    groups: dict[tuple[str, tuple[str, ...]], list[str]] = defaultdict(list)
    for c in corpus.chunks:
        groups[(c.doc_id, c.section_path)].append(c.chunk_id)
    return {
        cid: tuple(s for s in groups[(corpus[cid].doc_id, corpus[cid].section_path)] if s != cid)
        for cid in corpus.ids
    }


@dataclass
class IndexBundle:
    variant: str
    texts: dict[str, str]
    bm25: BM25Index
    vectors: VectorStore
    graph: GraphIndex
    parents: dict[str, tuple[str, ...]] = field(default_factory=dict)
    hype_questions: dict[str, list[str]] = field(default_factory=dict)


def _hype_questions(corpus: Corpus, gateway: Gateway) -> dict[str, list[str]]:
    out = {}
    for c in corpus.chunks:
        prompt = templates.render("hype_questions", n=HYPE_QUESTIONS, passage=c.text)
        reply = gateway.chat([{"role": "user", "content": prompt}], task="hype_questions",
                             context={"passage": c.text, "n": HYPE_QUESTIONS})
        qs = [line.strip() for line in reply.splitlines() if line.strip()][:HYPE_QUESTIONS]
        out[c.chunk_id] = qs or [c.text]
    return out


def _build(corpus: Corpus, variant: str, gateway: Gateway) -> IndexBundle:
    texts = {c.chunk_id: index_text(c, variant) for c in corpus.chunks}
    hype: dict[str, list[str]] = {}
    if variant == "hypothetical_prompt_embedding":
        hype = _hype_questions(corpus, gateway)
        owners = [cid for cid in corpus.ids for _ in hype[cid]]
        rows = [q for cid in corpus.ids for q in hype[cid]]
    else:
        owners = corpus.ids
        rows = [texts[cid] for cid in owners]
    vectors = VectorStore(owners, gateway.embed(rows, role="index"))
    parents = parent_table(corpus) if variant == "parent_document_retriever" else {}
    return IndexBundle(variant, texts, BM25Index.build(texts), vectors, build_graph(corpus), parents, hype)


def cache_dir_for(root: str | os.PathLike, corpus: Corpus, variant: str, gateway: Gateway) -> Path:
    return Path(root) / corpus.fingerprint()[:16] / variant / gateway.profile.embedding_profile


def _write_bundle(bundle: IndexBundle, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "texts.json").write_text(json.dumps(bundle.texts, ensure_ascii=False, indent=0))
    (directory / "bm25.json").write_text(json.dumps(bundle.bm25.to_dict(), sort_keys=True))
    (directory / "graph.json").write_text(json.dumps(bundle.graph.to_dict(), sort_keys=True, ensure_ascii=False))
    (directory / "hype_questions.json").write_text(json.dumps(bundle.hype_questions, ensure_ascii=False))
    bundle.vectors.write(directory)
    (directory / "COMPLETE").write_text(bundle.variant)


def _read_bundle(corpus: Corpus, variant: str, directory: Path) -> IndexBundle:
    return IndexBundle(
        variant=variant,
        texts=json.loads((directory / "texts.json").read_text()),
        bm25=BM25Index.from_dict(json.loads((directory / "bm25.json").read_text())),
        vectors=VectorStore.read(directory),
        graph=GraphIndex.from_dict(json.loads((directory / "graph.json").read_text())),
        parents=parent_table(corpus) if variant == "parent_document_retriever" else {},
        hype_questions=json.loads((directory / "hype_questions.json").read_text()),
    )


def build_indexes(corpus: Corpus, variant: str, gateway: Gateway,
                  cache_root: str | os.PathLike | None = None) -> IndexBundle:
    """Build (or load from ``cache_root``) the indexes for one pre-embedding variant."""
    if cache_root is not None:
        directory = cache_dir_for(cache_root, corpus, variant, gateway)
        if (directory / "COMPLETE").exists():
            log.debug("index cache hit %s", directory)
            return _read_bundle(corpus, variant, directory)
    bundle = _build(corpus, variant, gateway)
    if cache_root is not None:
        _write_bundle(bundle, directory)
    return bundle

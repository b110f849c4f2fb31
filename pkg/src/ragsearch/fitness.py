"""Genome evaluation over a QA set, and the persistent fitness cache."""

from __future__ import annotations

import json
import logging
import os
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

from .corpus import Dataset, QAItem
from .metrics import GENERATION_METRICS, RETRIEVAL_METRICS, retrieval_metrics, scalarize
from .pipeline import PipelineFailure, PipelineRunner, StageTrace
from .searchspace import Genome, SearchSpace, build_default_space, decode, genome_key

log = logging.getLogger(__name__)

METRIC_NAMES = RETRIEVAL_METRICS + GENERATION_METRICS
CACHE_FILE = "fitness_cache.jsonl"


@dataclass(frozen=True)
class MetricParams:
    k: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")


@dataclass(frozen=True)
class QuestionResult:
    question_id: str
    metrics: dict[str, float]
    answer: str
    judge_flagged: bool = False


@dataclass(frozen=True)
class FitnessRecord:
    genome: str
    F: float
    retrieval: float
    generation: float
    metrics: dict[str, float]
    n_questions: int
    dataset_fingerprint: str
    provider_profile: str
    timestamp: str = field(default="", compare=False)

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.genome, self.dataset_fingerprint, self.provider_profile)

    def to_dict(self, include_timestamp: bool = True) -> dict:
        d = {
            "genome": self.genome,
            "F": self.F,
            "retrieval": self.retrieval,
            "generation": self.generation,
            "metrics": {m: self.metrics[m] for m in METRIC_NAMES},
            "n_questions": self.n_questions,
            "dataset_fingerprint": self.dataset_fingerprint,
            "provider_profile": self.provider_profile,
        }
        if include_timestamp:
            d["timestamp"] = self.timestamp
        return d

    def to_json(self, include_timestamp: bool = True) -> str:
        return json.dumps(self.to_dict(include_timestamp), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "FitnessRecord":
        metrics = {m: float(d["metrics"][m]) for m in METRIC_NAMES}
        return cls(str(d["genome"]), float(d["F"]), float(d["retrieval"]), float(d["generation"]), metrics,
                   int(d["n_questions"]), str(d["dataset_fingerprint"]), str(d["provider_profile"]),
                   str(d.get("timestamp", "")))


def aggregate(results: Sequence[QuestionResult]) -> tuple[dict[str, float], float, float, float]:
    """Unweighted per-question means, then the scalarization."""
    if not results:
        raise ValueError("no questions to aggregate")
    means = {m: sum(r.metrics[m] for r in results) / len(results) for m in METRIC_NAMES}
    s = scalarize([means[m] for m in RETRIEVAL_METRICS], [means[m] for m in GENERATION_METRICS])
    return means, s.retrieval, s.generation, s.overall


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def score_question(runner: PipelineRunner, qa: QAItem, config, params: MetricParams,
                   on_trace: Callable[[StageTrace], None] | None = None) -> QuestionResult:
    judgment, answer, trace = runner.run(qa, config)
    try:
        verdict = runner.gateway.judge(qa.question, qa.gold_answer, answer)
        semantic = runner.gateway.semantic_score(qa.gold_answer, answer)
    except Exception as exc:
        raise PipelineFailure(qa.question_id, "evaluation", exc) from exc
    if on_trace:
        on_trace(trace)
    metrics = retrieval_metrics(judgment, params.k)
    metrics["llm"] = verdict.score
    metrics["semantic"] = semantic
    return QuestionResult(qa.question_id, metrics, answer, verdict.flagged)


def evaluate_genome(genome: Sequence[int], dataset: Dataset, runner: PipelineRunner,
                    params: MetricParams | None = None, space: SearchSpace | None = None,
                    max_workers: int = 1, on_trace: Callable[[str, StageTrace], None] | None = None,
                    clock: Callable[[], str] = utc_now) -> FitnessRecord:
    params = params or MetricParams()
    space = space or build_default_space()
    genome = tuple(genome)
    config = decode(space, genome)
    key = genome_key(genome)
    sink = (lambda t: on_trace(key, t)) if on_trace else None

    def one(qa):
        return score_question(runner, qa, config, params, sink)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            results = list(pool.map(one, dataset.questions))
    else:
        results = [one(qa) for qa in dataset.questions]
    flagged = sum(r.judge_flagged for r in results)
    if flagged:
        log.warning("%s: %d judge replies fell back to token F1", key, flagged)
    means, r, g, f = aggregate(results)
    return FitnessRecord(key, f, r, g, means, len(results), dataset.fingerprint(), runner.gateway.profile_id,
                         clock())


class CacheCorrupt(UserWarning):
    def __init__(self, line: int, reason: str = ""):
        super().__init__(f"fitness cache line {line} unreadable{': ' + reason if reason else ''}")
        self.line = line


class FitnessCache:
    """Append-only JSON-lines store; the last record for a key wins."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[tuple[str, str, str], FitnessRecord] = {}
        self.lines = 0
        self.corrupt = 0
        self.hits = 0
        self.misses = 0
        self._load()

    def _load(self) -> None:
        if not self.path.exists():
            return
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                self.lines += 1
                try:
                    rec = FitnessRecord.from_dict(json.loads(line))
                except (ValueError, KeyError, TypeError) as exc:
                    self.corrupt += 1
                    warnings.warn(CacheCorrupt(lineno, type(exc).__name__), stacklevel=3)
                    continue
                self._records[rec.key] = rec

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key) -> bool:
        return key in self._records

    def get(self, genome: str, dataset_fingerprint: str, provider_profile: str) -> FitnessRecord | None:
        with self._lock:
            rec = self._records.get((genome, dataset_fingerprint, provider_profile))
            if rec is None:
                self.misses += 1
            else:
                self.hits += 1
            return rec

    def put(self, record: FitnessRecord) -> None:
        with self._lock:
            if self._records.get(record.key) == record:
                return
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(record.to_json() + "\n")
                fh.flush()
            self._records[record.key] = record
            self.lines += 1

    def records(self) -> list[FitnessRecord]:
        return sorted(self._records.values(), key=lambda r: r.key)

    def stats(self) -> dict:
        return {"path": str(self.path), "records": len(self._records), "lines": self.lines,
                "corrupt_lines": self.corrupt, "hits": self.hits, "misses": self.misses}

    def clear(self) -> int:
        with self._lock:
            n = len(self._records)
            if self.path.exists():
                self.path.unlink()
            self._records.clear()
            self.lines = self.corrupt = 0
            return n


class CachedFitness:
    """Genome -> F evaluator for the search, backed by a FitnessCache.

    ``invocations`` counts real pipeline evaluations; cache hits do not
    touch the pipeline or the providers.
    """

    def __init__(self, dataset: Dataset, runner: PipelineRunner, cache: FitnessCache | None = None,
                 params: MetricParams | None = None, space: SearchSpace | None = None,
                 max_workers: int = 1, on_trace=None, clock: Callable[[], str] = utc_now):
        self.dataset = dataset
        self.runner = runner
        self.cache = cache
        self.params = params or MetricParams()
        self.space = space or build_default_space()
        self.max_workers = max_workers
        self.on_trace = on_trace
        self.clock = clock
        self.invocations = 0
        self.hits = 0
        self.latest: dict[str, FitnessRecord] = {}
        self._fingerprint = dataset.fingerprint()
        self._lock = threading.Lock()

    def record(self, genome: Genome) -> FitnessRecord:
        key = genome_key(genome)
        rec = self.cache.get(key, self._fingerprint, self.runner.gateway.profile_id) if self.cache else None
        if rec is not None:
            with self._lock:
                self.hits += 1
        else:
            with self._lock:
                self.invocations += 1
            rec = evaluate_genome(genome, self.dataset, self.runner, self.params, self.space,
                                  self.max_workers, self.on_trace, self.clock)
            if self.cache is not None:
                self.cache.put(rec)
        self.latest[key] = rec
        return rec

    def __call__(self, genome: Genome) -> float:
        return self.record(genome).F

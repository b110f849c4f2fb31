"""Genetic architecture search over a :class:`~ragsearch.searchspace.SearchSpace`.

The loop follows the usual elitist scheme: evaluate a random initial
population, then each generation pick parents, recombine and mutate them
into ``P - k`` offspring, evaluate those, and keep the best ``P`` of the
union. Every random decision is drawn from one ``numpy`` generator inside the
sequential loop, so a seeded run is reproducible even when fitness
evaluation is spread over threads.
"""

from __future__ import annotations

import enum
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from .searchspace import Genome, SearchSpace, genome_key, is_feasible, random_genome

log = logging.getLogger(__name__)

Evaluator = Callable[[Genome], float]

TOURNAMENT_SIZE = 3


class Selection(str, enum.Enum):
    ELITE = "elite"
    TOURNAMENT = "tournament"
    ROULETTE = "roulette"
    RANK = "rank"


class Crossover(str, enum.Enum):
    SINGLE_POINT = "single_point"
    MULTI_POINT = "multi_point"
    UNIFORM = "uniform"
    ORDER = "order"
    SEGMENT = "segment"


class Mutation(str, enum.Enum):
    ADAPTIVE = "adaptive"
    RANDOM = "random"
    CATEGORICAL = "categorical"
    SWAP = "swap"
    INVERSION = "inversion"
    COMPOSITE = "composite"


class StopReason(str, enum.Enum):
    TARGET_REACHED = "target_reached"
    PATIENCE_EXHAUSTED = "patience_exhausted"
    GENERATIONS_EXHAUSTED = "generations_exhausted"


class DegenerateFitness(UserWarning):
    """Roulette selection saw no positive fitness and fell back to uniform."""


class EvaluatorFailure(RuntimeError):
    def __init__(self, genome: Genome, cause: BaseException, stats: "RunStats"):
        super().__init__(f"fitness evaluation failed for {genome_key(genome)}: {cause!r}")
        self.genome = genome
        self.cause = cause
        self.stats = stats


@dataclass
class GAParams:
    population_size: int = 16
    generations: int = 20
    crossover_rate: float = 0.6
    mutation_rate: float = 0.08
    adaptive_mutation_bounds: tuple[float, float] = (0.01, 0.2)
    elitism_count: int = 5
    selection_method: Selection = Selection.ELITE
    crossover_method: Crossover = Crossover.UNIFORM
    mutation_method: Mutation = Mutation.ADAPTIVE
    patience: int = 100
    target_fitness: float = 1.0
    seed: int = 42
    max_workers: int = 1

    def __post_init__(self):
        self.selection_method = Selection(self.selection_method)
        self.crossover_method = Crossover(self.crossover_method)
        self.mutation_method = Mutation(self.mutation_method)
        self.adaptive_mutation_bounds = tuple(self.adaptive_mutation_bounds)
        lo, hi = self.adaptive_mutation_bounds
        if self.population_size < 1 or self.generations < 1 or self.patience < 1:
            raise ValueError("population_size, generations and patience must be positive")
        if not 1 <= self.elitism_count <= self.population_size:
            raise ValueError("elitism_count must lie in 1..population_size")
        if not (0 < lo <= hi <= 1):
            raise ValueError("adaptive bounds must satisfy 0 < min <= max <= 1")
        for name in ("crossover_rate", "mutation_rate", "target_fitness"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "GAParams":
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "population_size": self.population_size,
            "generations": self.generations,
            "crossover_rate": self.crossover_rate,
            "mutation_rate": self.mutation_rate,
            "adaptive_mutation_bounds": list(self.adaptive_mutation_bounds),
            "elitism_count": self.elitism_count,
            "selection_method": self.selection_method.value,
            "crossover_method": self.crossover_method.value,
            "mutation_method": self.mutation_method.value,
            "patience": self.patience,
            "target_fitness": self.target_fitness,
            "seed": self.seed,
            "max_workers": self.max_workers,
        }


@dataclass(frozen=True)
class Individual:
    genome: Genome
    fitness: float

    def sort_key(self):
        return (-self.fitness, self.genome)


@dataclass
class Population:
    generation: int
    individuals: list[Individual]
    best: Individual

    @property
    def genomes(self) -> list[Genome]:
        return [ind.genome for ind in self.individuals]

    @property
    def fitnesses(self) -> list[float]:
        return [ind.fitness for ind in self.individuals]


@dataclass
class RunStats:
    evaluations_total: int = 0
    cache_hits: int = 0
    generations_run: int = 0
    best_trace: list[float] = field(default_factory=list)
    stop_reason: StopReason | None = None
    log: list[dict] = field(default_factory=list)

    @property
    def unique_evaluations(self) -> int:
        return self.evaluations_total - self.cache_hits

    def to_dict(self) -> dict:
        return {
            "evaluations_total": self.evaluations_total,
            "cache_hits": self.cache_hits,
            "unique_evaluations": self.unique_evaluations,
            "generations_run": self.generations_run,
            "best_trace": self.best_trace,
            "stop_reason": self.stop_reason.value if self.stop_reason else None,
        }

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.log:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def ranked(individuals: Sequence[Individual]) -> list[Individual]:
    """Descending fitness, ties by lexicographic genome."""
    return sorted(individuals, key=Individual.sort_key)


# -- selection ---------------------------------------------------------------


def elite_select(pop: Population | Sequence[Individual], k: int) -> list[Individual]:
    individuals = pop.individuals if isinstance(pop, Population) else list(pop)
    if not 0 < k <= len(individuals):
        raise ValueError(f"k={k} outside 1..{len(individuals)}")
    return ranked(individuals)[:k]


def tournament_select(individuals: Sequence[Individual], rng: np.random.Generator,
                      size: int = TOURNAMENT_SIZE) -> Individual:
    picks = rng.integers(len(individuals), size=size)
    contenders = [individuals[int(i)] for i in picks]
    # Ties keep the first drawn contender, which keeps equal-fitness draws uniform.
    best = contenders[0]
    for c in contenders[1:]:
        if c.fitness > best.fitness:
            best = c
    return best


def roulette_select(individuals: Sequence[Individual], rng: np.random.Generator) -> Individual:
    weights = np.array([max(ind.fitness, 0.0) for ind in individuals], dtype=float)
    total = weights.sum()
    if total <= 0:
        warnings.warn("all fitness values are zero; roulette falls back to uniform", DegenerateFitness)
        return individuals[int(rng.integers(len(individuals)))]
    return individuals[int(rng.choice(len(individuals), p=weights / total))]


def rank_weights(n: int) -> np.ndarray:
    """Linear rank weights, best first: n, n-1, ..., 1 normalised to sum 1."""
    w = np.arange(n, 0, -1, dtype=float)
    return w / w.sum()


def rank_select(individuals: Sequence[Individual], rng: np.random.Generator) -> Individual:
    order = ranked(individuals)
    return order[int(rng.choice(len(order), p=rank_weights(len(order))))]


def select_parents(pop: Population, params: GAParams, rng: np.random.Generator) -> list[Individual]:
    k = params.elitism_count
    if params.selection_method is Selection.ELITE:
        return elite_select(pop, k)
    pick = {
        Selection.TOURNAMENT: tournament_select,
        Selection.ROULETTE: roulette_select,
        Selection.RANK: rank_select,
    }[params.selection_method]
    return [pick(pop.individuals, rng) for _ in range(k)]


# -- variation ---------------------------------------------------------------


def _modulo_repair(space: SearchSpace, genes: Sequence[int]) -> Genome:
    return tuple(int(g) % d for g, d in zip(genes, space.cardinalities))


def repair(space: SearchSpace, genome: Sequence[int], rng: np.random.Generator,
           max_rounds: int = 1000) -> Genome:
    """Resample genes of violated rules until the genome is feasible."""
    genome = list(_modulo_repair(space, genome))
    names = [f.name for f in space.families]
    for _ in range(max_rounds):
        violated = space.violated_rules(genome)
        if not violated:
            return tuple(genome)
        for rule in violated:
            for fam_name in rule.families:
                i = names.index(fam_name)
                genome[i] = int(rng.integers(space.cardinalities[i]))
    raise RuntimeError(f"could not repair genome {genome_key(genome)}")


def _cut_points(rng: np.random.Generator, n: int, count: int) -> list[int]:
    count = min(count, n - 1)
    return sorted(int(c) for c in rng.choice(np.arange(1, n), size=count, replace=False))


def _alternate(a: Genome, b: Genome, cuts: Sequence[int]) -> tuple[list[int], list[int]]:
    c1, c2, take_a = [], [], True
    bounds = [0, *cuts, len(a)]
    for lo, hi in zip(bounds, bounds[1:]):
        src1, src2 = (a, b) if take_a else (b, a)
        c1.extend(src1[lo:hi])
        c2.extend(src2[lo:hi])
        take_a = not take_a
    return c1, c2


def _order_child(keep: Genome, donor: Genome, i: int, j: int) -> list[int]:
    # Positional OX: keep[i:j] stays; the other slots are filled, starting at
    # j and wrapping, with donor values read from j onwards, skipping values
    # already placed by the kept slice (as a multiset). Shortfalls are padded
    # with the skipped values. Modulo repair happens afterwards.
    n = len(keep)
    child: list[int | None] = [None] * n
    child[i:j] = keep[i:j]
    pending: dict[int, int] = {}
    for v in keep[i:j]:
        pending[v] = pending.get(v, 0) + 1
    fill, skipped = [], []
    for step in range(n):
        v = donor[(j + step) % n]
        if pending.get(v, 0):
            pending[v] -= 1
            skipped.append(v)
        else:
            fill.append(v)
    fill.extend(skipped)
    slots = [(j + step) % n for step in range(n) if child[(j + step) % n] is None]
    for slot, v in zip(slots, fill):
        child[slot] = v
    return child  # type: ignore[return-value]


def crossover(space: SearchSpace, a: Genome, b: Genome, method: Crossover | str, rate: float,
              rng: np.random.Generator) -> tuple[Genome, Genome]:
    method = Crossover(method)
    n = len(a)
    if rng.random() >= rate or n < 2:
        return tuple(a), tuple(b)
    if a == b:
        return tuple(a), tuple(b)
    if method is Crossover.UNIFORM:
        mask = rng.random(n) < 0.5
        c1 = [x if m else y for x, y, m in zip(a, b, mask)]
        c2 = [y if m else x for x, y, m in zip(a, b, mask)]
    elif method is Crossover.SINGLE_POINT:
        c1, c2 = _alternate(a, b, _cut_points(rng, n, 1))
    elif method is Crossover.MULTI_POINT:
        c1, c2 = _alternate(a, b, _cut_points(rng, n, 3))
    elif method is Crossover.SEGMENT:
        start = int(rng.integers(n))
        length = int(rng.integers(1, n))
        idx = [(start + s) % n for s in range(length)]
        c1, c2 = list(a), list(b)
        for i in idx:
            c1[i], c2[i] = b[i], a[i]
    else:
        i, j = sorted(int(x) for x in rng.choice(n + 1, size=2, replace=False))
        c1 = _order_child(a, b, i, j)
        c2 = _order_child(b, a, i, j)
    return repair(space, c1, rng), repair(space, c2, rng)


def adaptive_rate(bounds: tuple[float, float], diversity: float) -> float:
    lo, hi = bounds
    return lo + (hi - lo) * (1.0 - diversity)


def _categorical(space: SearchSpace, genes: list[int], rate: float, rng: np.random.Generator,
                 allow_same: bool = False) -> list[int]:
    for i, d in enumerate(space.cardinalities):
        if rng.random() >= rate:
            continue
        if allow_same:
            genes[i] = int(rng.integers(d))
        elif d > 1:
            other = int(rng.integers(d - 1))
            genes[i] = other if other < genes[i] else other + 1
    return genes


def mutate(space: SearchSpace, genome: Genome, method: Mutation | str, rate: float,
           rng: np.random.Generator, diversity: float = 0.0,
           bounds: tuple[float, float] = (0.01, 0.2)) -> Genome:
    """Mutate ``genome``; ``rate`` is ignored by adaptive mutation, which derives
    its rate from ``diversity`` within ``bounds``."""
    method = Mutation(method)
    genes = list(genome)
    n = len(genes)
    if method is Mutation.ADAPTIVE:
        genes = _categorical(space, genes, adaptive_rate(bounds, diversity), rng)
    elif method is Mutation.RANDOM:
        genes = _categorical(space, genes, rate, rng, allow_same=True)
    elif method is Mutation.CATEGORICAL:
        genes = _categorical(space, genes, rate, rng)
    elif method is Mutation.SWAP:
        if rng.random() < rate:
            i, j = (int(x) for x in rng.choice(n, size=2, replace=False))
            genes[i], genes[j] = genes[j], genes[i]
    elif method is Mutation.INVERSION:
        if rng.random() < rate:
            i, j = sorted(int(x) for x in rng.choice(n + 1, size=2, replace=False))
            genes[i:j] = genes[i:j][::-1]
    else:
        genes = _categorical(space, genes, rate, rng)
        if rng.random() < rate:
            i, j = (int(x) for x in rng.choice(n, size=2, replace=False))
            genes[i], genes[j] = genes[j], genes[i]
    return repair(space, genes, rng)


def population_diversity(genomes: Sequence[Genome]) -> float:
    """Mean pairwise Hamming distance divided by genome length."""
    if len(genomes) < 2:
        return 0.0
    n = len(genomes[0])
    arr = np.asarray(genomes)
    total = sum(int(np.count_nonzero(arr[i] != arr[j])) for i, j in combinations(range(len(arr)), 2))
    pairs = len(arr) * (len(arr) - 1) // 2
    return total / (pairs * n)


def elitist_replacement(prev: Population, offspring: Sequence[Individual], size: int | None = None) -> Population:
    """Best ``size`` of ``prev`` and ``offspring``; duplicate genomes count once
    unless too few distinct genomes remain to fill the population."""
    size = size or len(prev.individuals)
    pool = ranked([*prev.individuals, *offspring])
    seen: set[Genome] = set()
    unique, dupes = [], []
    for ind in pool:
        (dupes if ind.genome in seen else unique).append(ind)
        seen.add(ind.genome)
    chosen = ranked((unique + dupes)[:size]) if len(unique) < size else unique[:size]
    best = prev.best if prev.best.sort_key() <= chosen[0].sort_key() else chosen[0]
    return Population(prev.generation + 1, chosen, best)


# -- search loop -------------------------------------------------------------


class _MemoEvaluator:
    """Per-run memo in front of the caller's evaluator."""

    def __init__(self, evaluator: Evaluator, stats: RunStats, max_workers: int):
        self.evaluator = evaluator
        self.stats = stats
        self.max_workers = max_workers
        self.seen: dict[Genome, float] = {}

    def __call__(self, genomes: Sequence[Genome]) -> list[float]:
        self.stats.evaluations_total += len(genomes)
        fresh = list(dict.fromkeys(g for g in genomes if g not in self.seen))
        self.stats.cache_hits += len(genomes) - len(fresh)
        if self.max_workers > 1 and len(fresh) > 1:
            with ThreadPoolExecutor(self.max_workers) as pool:
                futures = [(g, pool.submit(self.evaluator, g)) for g in fresh]
                results = [(g, self._result(g, fut.result)) for g, fut in futures]
        else:
            results = [(g, self._result(g, lambda g=g: self.evaluator(g))) for g in fresh]
        for g, f in results:
            self.seen[g] = f
        return [self.seen[g] for g in genomes]

    def _result(self, genome: Genome, call) -> float:
        try:
            value = float(call())
        except Exception as exc:
            raise EvaluatorFailure(genome, exc, self.stats) from exc
        if not 0.0 <= value <= 1.0 or value != value:
            raise EvaluatorFailure(genome, ValueError(f"fitness {value} outside [0, 1]"), self.stats)
        return value


def _log_row(stats: RunStats, pop: Population) -> None:
    fits = pop.fitnesses
    row = {
        "generation": pop.generation,
        "best": pop.best.fitness,
        "mean": float(np.mean(fits)),
        "diversity": population_diversity(pop.genomes),
        "evaluations": stats.unique_evaluations,
    }
    stats.log.append(row)
    stats.best_trace.append(pop.best.fitness)
    log.info("generation %(generation)d best=%(best).4f mean=%(mean).4f diversity=%(diversity).3f", row)


def make_offspring(space: SearchSpace, pop: Population, params: GAParams,
                   rng: np.random.Generator) -> list[Genome]:
    parents = select_parents(pop, params, rng)
    diversity = population_diversity(pop.genomes)
    n_children = params.population_size - params.elitism_count
    children: list[Genome] = []
    while len(children) < n_children:
        if len(parents) > 1:
            i, j = (int(x) for x in rng.choice(len(parents), size=2, replace=False))
        else:
            i = j = 0
        for child in crossover(space, parents[i].genome, parents[j].genome,
                               params.crossover_method, params.crossover_rate, rng):
            children.append(mutate(space, child, params.mutation_method, params.mutation_rate, rng,
                                   diversity=diversity, bounds=params.adaptive_mutation_bounds))
    return children[:n_children]


def run_search(space: SearchSpace, params: GAParams, evaluator: Evaluator,
               on_generation: Callable[[Population], None] | None = None
               ) -> tuple[Genome, float, RunStats]:
    """Run the genetic search; returns ``(best genome, best fitness, stats)``.

    ``evaluator`` must map a feasible genome to a fitness in ``[0, 1]``. Each
    distinct genome is evaluated at most once per run.
    """
    rng = np.random.default_rng(params.seed)
    stats = RunStats()
    evaluate = _MemoEvaluator(evaluator, stats, params.max_workers)

    genomes = [random_genome(space, rng) for _ in range(params.population_size)]
    individuals = ranked(Individual(g, f) for g, f in zip(genomes, evaluate(genomes)))
    pop = Population(0, individuals, individuals[0])
    _log_row(stats, pop)
    if on_generation:
        on_generation(pop)

    stale = 0
    stats.stop_reason = StopReason.GENERATIONS_EXHAUSTED
    if pop.best.fitness >= params.target_fitness:
        stats.stop_reason = StopReason.TARGET_REACHED
    else:
        for _ in range(params.generations):
            children = make_offspring(space, pop, params, rng)
            offspring = [Individual(g, f) for g, f in zip(children, evaluate(children))]
            before = pop.best.fitness
            pop = elitist_replacement(pop, offspring, params.population_size)
            stats.generations_run += 1
            _log_row(stats, pop)
            if on_generation:
                on_generation(pop)
            stale = stale + 1 if pop.best.fitness <= before else 0
            if pop.best.fitness >= params.target_fitness:
                stats.stop_reason = StopReason.TARGET_REACHED
                break
            if stale >= params.patience:
                stats.stop_reason = StopReason.PATIENCE_EXHAUSTED
                break

    assert all(is_feasible(space, g) for g in evaluate.seen)
    return pop.best.genome, pop.best.fitness, stats

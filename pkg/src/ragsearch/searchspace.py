"""Technique families, genome encoding and feasibility rules.

A genome is a tuple of nine category indices, one per technique family, in
the fixed family order below. Index 0 of every optional family disables the
stage, so the all-zero genome is the naive vector-retrieval baseline.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, fields
from typing import Iterator, Sequence

import numpy as np

Genome = tuple[int, ...]

NONE = "none"

FAMILY_ORDER = (
    "pre_embedding",
    "query_expansion",
    "retrieval",
    "reranking",
    "passage_filter",
    "passage_augmentation",
    "passage_compression",
    "prompt_maker",
    "post_generation",
)

DEFAULT_OPTIONS: dict[str, tuple[str, ...]] = {
    "pre_embedding": (
        NONE,
        "contextual_chunk_headers",
        "parent_document_retriever",
        "hypothetical_prompt_embedding",
    ),
    "query_expansion": (
        NONE,
        "multi_query",
        "rag_fusion",
        "decomposition",
        "step_back",
        "hyde",
        "query_rewriting",
        "graph_expansion",
    ),
    "retrieval": ("vector", "bm25", "hybrid", "graph", "complete_hybrid"),
    "reranking": (NONE, "cross_encoder", "llm_rerank", "hybrid_rerank"),
    "passage_filter": ("simple_threshold", "similarity_threshold"),
    "passage_augmentation": (NONE, "prev_next", "relevant_segment_extraction"),
    "passage_compression": (NONE, "tree_summarize", "llm_refine"),
    "prompt_maker": ("simple_listing", "long_context_reorder"),
    "post_generation": (NONE, "reflection_revising"),
}

MANDATORY = frozenset({"retrieval", "passage_filter", "prompt_maker"})

DEFAULT_CARDINALITY = 46_080

# Expansion techniques that hand several ranked lists to the fusion step.
MULTI_LIST_EXPANSIONS = ("rag_fusion", "graph_expansion")


class SearchSpaceError(ValueError):
    pass


class GeneOutOfRange(SearchSpaceError):
    def __init__(self, index: int, value: int, size: int):
        super().__init__(f"gene {index} = {value} outside 0..{size - 1}")
        self.index = index


class Infeasible(SearchSpaceError):
    def __init__(self, rule_id: str, detail: str = ""):
        super().__init__(f"infeasible: rule {rule_id!r} violated" + (f" ({detail})" if detail else ""))
        self.rule_id = rule_id


class UnknownOption(SearchSpaceError):
    def __init__(self, family: str, name: str):
        super().__init__(f"family {family!r} has no option {name!r}")
        self.family = family
        self.name = name


@dataclass(frozen=True)
class TechniqueFamily:
    family_id: int
    name: str
    options: tuple[str, ...]
    mandatory: bool

    def __post_init__(self):
        if not self.options:
            raise SearchSpaceError(f"family {self.name!r} has no options")
        if len(set(self.options)) != len(self.options):
            raise SearchSpaceError(f"family {self.name!r} has duplicate options")
        if self.mandatory and NONE in self.options:
            raise SearchSpaceError(f"mandatory family {self.name!r} cannot offer {NONE!r}")
        if not self.mandatory and self.options[0] != NONE:
            raise SearchSpaceError(f"optional family {self.name!r} must start with {NONE!r}")

    @property
    def size(self) -> int:
        return len(self.options)

    def index(self, option: str) -> int:
        try:
            return self.options.index(option)
        except ValueError:
            raise UnknownOption(self.name, option) from None


@dataclass(frozen=True)
class FeasibilityRule:
    """Declarative constraint checked against a decoded configuration.

    ``kind`` selects the check; ``params`` carries its constants. Supported
    kinds:

    ``min_candidate_pool``
        Reranking other than ``none`` needs ``candidate_pool >= shortlist``.
    ``ranked_list_fusion``
        The listed expansion techniques need a retrieval mode yielding one
        ranked list per query. Every retrieval mode here does, so the rule
        never fails; it is kept so the constraint is visible in the config.
    """

    rule_id: str
    kind: str
    families: tuple[str, ...]
    params: dict = field(default_factory=dict, hash=False, compare=True)

    def holds(self, config: "PipelineConfig") -> bool:
        if self.kind == "min_candidate_pool":
            if config.reranking == NONE:
                return True
            return self.params["candidate_pool"] >= self.params["shortlist"]
        if self.kind == "ranked_list_fusion":
            if config.query_expansion not in self.params.get("expansions", ()):
                return True
            return config.retrieval in self.params.get("list_producing", ())
        raise SearchSpaceError(f"unknown rule kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"id": self.rule_id, "kind": self.kind, "families": list(self.families), "params": self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "FeasibilityRule":
        params = {k: tuple(v) if isinstance(v, list) else v for k, v in d.get("params", {}).items()}
        return cls(d["id"], d["kind"], tuple(d["families"]), params)


@dataclass(frozen=True)
class PipelineConfig:
    """One named technique per family, decoded from a genome."""

    pre_embedding: str = NONE
    query_expansion: str = NONE
    retrieval: str = "vector"
    reranking: str = NONE
    passage_filter: str = "simple_threshold"
    passage_augmentation: str = NONE
    passage_compression: str = NONE
    prompt_maker: str = "simple_listing"
    post_generation: str = NONE

    def as_dict(self) -> dict[str, str]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def selections(self) -> tuple[str, ...]:
        return tuple(getattr(self, name) for name in FAMILY_ORDER)


def default_rules(candidate_pool: int = 20, shortlist: int = 10) -> tuple[FeasibilityRule, ...]:
    return (
        FeasibilityRule(
            "rerank_candidate_pool",
            "min_candidate_pool",
            ("retrieval", "reranking"),
            {"candidate_pool": candidate_pool, "shortlist": shortlist},
        ),
        FeasibilityRule(
            "fusion_needs_ranked_lists",
            "ranked_list_fusion",
            ("query_expansion", "retrieval"),
            {"expansions": MULTI_LIST_EXPANSIONS, "list_producing": DEFAULT_OPTIONS["retrieval"]},
        ),
    )


@dataclass(frozen=True)
class SearchSpace:
    families: tuple[TechniqueFamily, ...]
    rules: tuple[FeasibilityRule, ...] = ()

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(f.size for f in self.families)

    @property
    def n_genes(self) -> int:
        return len(self.families)

    def family(self, name: str) -> TechniqueFamily:
        for fam in self.families:
            if fam.name == name:
                return fam
        raise KeyError(name)

    def baseline(self) -> Genome:
        return (0,) * self.n_genes

    def check_range(self, genome: Sequence[int]) -> Genome:
        genome = tuple(int(x) for x in genome)
        if len(genome) != self.n_genes:
            raise SearchSpaceError(f"genome has {len(genome)} genes, space has {self.n_genes} families")
        for i, (value, fam) in enumerate(zip(genome, self.families)):
            if not 0 <= value < fam.size:
                raise GeneOutOfRange(i, value, fam.size)
        return genome

    # Decoding does not go through the feasibility rules so that rules can
    # inspect a named configuration.
    def _named(self, genome: Genome) -> PipelineConfig:
        return PipelineConfig(**{fam.name: fam.options[g] for fam, g in zip(self.families, genome)})

    def violated_rules(self, genome: Sequence[int]) -> list[FeasibilityRule]:
        config = self._named(self.check_range(genome))
        return [rule for rule in self.rules if not rule.holds(config)]

    def to_dict(self) -> dict:
        return {
            "families": [
                {"id": f.family_id, "name": f.name, "options": list(f.options), "mandatory": f.mandatory}
                for f in self.families
            ],
            "rules": [r.to_dict() for r in self.rules],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        families = tuple(
            TechniqueFamily(f["id"], f["name"], tuple(f["options"]), f["mandatory"]) for f in d["families"]
        )
        return cls(families, tuple(FeasibilityRule.from_dict(r) for r in d.get("rules", [])))

    @classmethod
    def from_json(cls, text: str) -> "SearchSpace":
        return cls.from_dict(json.loads(text))


def build_default_space(candidate_pool: int = 20, shortlist: int = 10) -> SearchSpace:
    """The nine-family space. ``candidate_pool``/``shortlist`` feed the rerank rule."""
    families = tuple(
        TechniqueFamily(i, name, DEFAULT_OPTIONS[name], name in MANDATORY) for i, name in enumerate(FAMILY_ORDER)
    )
    space = SearchSpace(families, default_rules(candidate_pool, shortlist))
    assert space.cardinalities == (4, 8, 5, 4, 2, 3, 3, 2, 2)
    assert cardinality(space) == DEFAULT_CARDINALITY
    return space


def cardinality(space: SearchSpace) -> int:
    return math.prod(space.cardinalities)


def decode(space: SearchSpace, genome: Sequence[int]) -> PipelineConfig:
    genome = space.check_range(genome)
    config = space._named(genome)
    for rule in space.rules:
        if not rule.holds(config):
            raise Infeasible(rule.rule_id)
    return config


def encode(space: SearchSpace, config: PipelineConfig) -> Genome:
    chosen = config.as_dict()
    return tuple(fam.index(chosen[fam.name]) for fam in space.families)


def is_feasible(space: SearchSpace, genome: Sequence[int]) -> bool:
    return not space.violated_rules(genome)


def random_genome(space: SearchSpace, rng: np.random.Generator, max_tries: int = 10_000) -> Genome:
    """Uniform draw over feasible genomes by rejection sampling."""
    sizes = space.cardinalities
    for _ in range(max_tries):
        genome = tuple(int(rng.integers(d)) for d in sizes)
        if is_feasible(space, genome):
            return genome
    raise SearchSpaceError(f"no feasible genome found in {max_tries} draws")


def enumerate_genomes(space: SearchSpace) -> Iterator[Genome]:
    return itertools.product(*(range(d) for d in space.cardinalities))


def genome_key(genome: Sequence[int]) -> str:
    """Canonical serialization, e.g. ``[0,1,0,1,1,1,0,1,1]``."""
    return "[" + ",".join(str(int(g)) for g in genome) + "]"


def parse_genome(text: str) -> Genome:
    text = text.strip()
    if text.startswith("["):
        text = text[1:]
    if text.endswith("]"):
        text = text[:-1]
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise SearchSpaceError(f"cannot parse genome {text!r}") from None

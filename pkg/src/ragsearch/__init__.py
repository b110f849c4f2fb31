"""Genetic search over modular retrieval-augmented generation pipelines."""

from importlib import resources

from .corpus import Dataset, load_dataset
from .evolve import GAParams, run_search
from .fitness import CachedFitness, FitnessCache, FitnessRecord, MetricParams, evaluate_genome
from .gateway import ProviderProfile, StubGateway, make_gateway
from .metrics import scalarize
from .pipeline import PipelineParams, PipelineRunner, run_pipeline
from .searchspace import PipelineConfig, SearchSpace, build_default_space, decode, encode, genome_key

__version__ = "0.1.0"


def load_toy() -> Dataset:
    """The bundled 30-chunk, 10-question fixture."""
    data = resources.files(__name__) / "data"
    return load_dataset(str(data / "toy_corpus.jsonl"), str(data / "toy_qa.jsonl"), "toy")


__all__ = [
    "CachedFitness", "Dataset", "FitnessCache", "FitnessRecord", "GAParams", "MetricParams",
    "PipelineConfig", "PipelineParams", "PipelineRunner", "ProviderProfile", "SearchSpace", "StubGateway",
    "build_default_space", "decode", "encode", "evaluate_genome", "genome_key", "load_dataset", "load_toy",
    "make_gateway", "run_pipeline", "run_search", "scalarize",
]

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ragsearch.searchspace import (
    FAMILY_ORDER,
    GeneOutOfRange,
    Infeasible,
    PipelineConfig,
    SearchSpace,
    SearchSpaceError,
    TechniqueFamily,
    UnknownOption,
    build_default_space,
    cardinality,
    decode,
    encode,
    enumerate_genomes,
    genome_key,
    is_feasible,
    parse_genome,
    random_genome,
)


def genomes(space):
    return st.tuples(*(st.integers(0, d - 1) for d in space.cardinalities))


def test_family_sizes(space):
    assert space.cardinalities == (4, 8, 5, 4, 2, 3, 3, 2, 2)
    assert [f.name for f in space.families] == list(FAMILY_ORDER)


def test_cardinality_is_product_of_family_sizes(space):
    assert cardinality(space) == math.prod([4, 8, 5, 4, 2, 3, 3, 2, 2]) == 46_080


def test_every_enumerated_genome_is_feasible_by_default(space):
    all_genomes = list(enumerate_genomes(space))
    assert len(all_genomes) == len(set(all_genomes)) == 46_080
    assert all(is_feasible(space, g) for g in all_genomes)


def test_baseline_is_the_all_zero_genome(space):
    cfg = decode(space, space.baseline())
    assert space.baseline() == (0,) * 9
    assert cfg == PipelineConfig()
    assert cfg.retrieval == "vector" and cfg.passage_filter == "simple_threshold"
    assert cfg.prompt_maker == "simple_listing"
    assert {cfg.pre_embedding, cfg.query_expansion, cfg.reranking, cfg.passage_augmentation,
            cfg.passage_compression, cfg.post_generation} == {"none"}


def test_decode_names_each_gene(space):
    cfg = decode(space, parse_genome("0,1,0,1,1,1,0,1,1"))
    assert cfg.as_dict() == {
        "pre_embedding": "none",
        "query_expansion": "multi_query",
        "retrieval": "vector",
        "reranking": "cross_encoder",
        "passage_filter": "similarity_threshold",
        "passage_augmentation": "prev_next",
        "passage_compression": "none",
        "prompt_maker": "long_context_reorder",
        "post_generation": "reflection_revising",
    }


@given(st.data())
def test_encode_inverts_decode(data):
    space = build_default_space()
    g = data.draw(genomes(space))
    assert encode(space, decode(space, g)) == g


def test_out_of_range_gene(space):
    with pytest.raises(GeneOutOfRange) as err:
        decode(space, (0, 8, 0, 0, 0, 0, 0, 0, 0))
    assert err.value.index == 1
    with pytest.raises(SearchSpaceError):
        decode(space, (0, 0, 0))


def test_unknown_option_on_encode(space):
    with pytest.raises(UnknownOption):
        encode(space, PipelineConfig(retrieval="splade"))


def test_rerank_rule_prunes_rerankers_when_pool_too_small():
    space = build_default_space(candidate_pool=5, shortlist=10)
    with pytest.raises(Infeasible) as err:
        decode(space, (0, 0, 0, 1, 0, 0, 0, 0, 0))
    assert err.value.rule_id == "rerank_candidate_pool"
    # only reranking=none survives: a quarter of the space
    feasible = sum(1 for g in enumerate_genomes(space) if g[3] == 0)
    assert feasible == 46_080 // 4
    assert is_feasible(space, (0,) * 9)


def test_random_genome_matches_direct_draws(space):
    g = random_genome(space, np.random.default_rng(42))
    ref = np.random.default_rng(42)
    assert g == tuple(int(ref.integers(d)) for d in space.cardinalities)


def test_random_genome_rejects_infeasible():
    space = build_default_space(candidate_pool=1, shortlist=10)
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert random_genome(space, rng)[3] == 0


def test_space_json_round_trip(space):
    again = SearchSpace.from_json(space.to_json())
    assert again == space
    assert cardinality(again) == 46_080


def test_genome_key_and_parse():
    assert genome_key((0, 1, 0, 1, 1, 1, 0, 1, 1)) == "[0,1,0,1,1,1,0,1,1]"
    assert parse_genome("[0,1,0,1,1,1,0,1,1]") == parse_genome(" 0, 1,0,1,1,1,0,1,1 ")
    with pytest.raises(SearchSpaceError):
        parse_genome("0,x,1")


def test_family_validation():
    with pytest.raises(SearchSpaceError):
        TechniqueFamily(0, "retrieval", ("none", "vector"), mandatory=True)
    with pytest.raises(SearchSpaceError):
        TechniqueFamily(0, "reranking", ("cross_encoder",), mandatory=False)
    with pytest.raises(SearchSpaceError):
        TechniqueFamily(0, "x", ("none", "a", "a"), mandatory=False)

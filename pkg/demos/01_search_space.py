# Walk through the configuration space: nine families, one gene each.
import numpy as np

from ragsearch.searchspace import (build_default_space, cardinality, decode, enumerate_genomes, is_feasible,
                                   parse_genome, random_genome)

space = build_default_space()
for fam in space.families:
    print(fam.family_id, fam.name, fam.options)

print("configurations:", cardinality(space))

# the all-zero genome is the naive pipeline
print(decode(space, space.baseline()).as_dict())

# genomes come straight from a comma list
g = parse_genome("0,1,0,1,1,1,0,1,1")
print(g, decode(space, g).reranking)

rng = np.random.default_rng(0)
for _ in range(3):
    print(random_genome(space, rng))

# shrink the candidate pool below the rerank shortlist and rerankers drop out
tight = build_default_space(candidate_pool=5, shortlist=10)
print("feasible with a small pool:", sum(is_feasible(tight, g) for g in enumerate_genomes(tight)))

# Ranking metrics on a handful of hand-made rankings.
from ragsearch.metrics import RetrievalJudgment, retrieval_metrics, scalarize

gold = {"a", "b"}
for ranked in (["a", "b", "x"], ["x", "a", "y", "b"], ["x", "y", "z", "u", "v", "a"]):
    m = retrieval_metrics(RetrievalJudgment(tuple(ranked), frozenset(gold)))
    print(ranked, {k: round(v, 3) for k, v in m.items()})

# fitness is the mean of a retrieval mean and a generation mean
s = scalarize((0.895, 0.813, 0.871, 0.952), (0.890, 0.916))
print(round(s.retrieval, 4), round(s.generation, 4), round(s.overall, 4))

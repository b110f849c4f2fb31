# One question through the pipeline with stub providers, stage by stage.
from ragsearch import load_toy
from ragsearch.fitness import evaluate_genome
from ragsearch.gateway import ProviderProfile, StubGateway
from ragsearch.pipeline import PipelineRunner
from ragsearch.searchspace import build_default_space, decode

toy = load_toy()
space = build_default_space()
gateway = StubGateway(ProviderProfile.stub(0))
runner = PipelineRunner(toy.corpus, gateway)

qa = toy.questions[1]
print(qa.question, "->", sorted(qa.gold_chunk_ids))

for genome in (space.baseline(), (1, 1, 2, 1, 1, 2, 0, 1, 1)):
    judgment, answer, trace = runner.run(qa, decode(space, genome))
    print("\n", genome)
    for rec in trace.records:
        print(f"  {rec.stage:22s} {rec.technique:28s} {rec.n_in:3d} -> {rec.n_out:3d} {dict(rec.calls)}")
    print("  retrieved", judgment.ranked)
    print("  answer   ", answer)

# fitness over all ten questions
for genome in (space.baseline(), (0, 6, 1, 0, 0, 0, 1, 0, 0)):
    rec = evaluate_genome(genome, toy, runner)
    print(rec.genome, round(rec.F, 4), {k: round(v, 3) for k, v in rec.metrics.items()})

"""Command line entry point: ``ragsearch search|eval|baseline|report|cache``.

Exit codes: 0 ok, 2 configuration or data error, 3 infeasible genome,
4 provider failure, 130 interrupted.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .corpus import CorpusError, Dataset, load_dataset
from .evolve import EvaluatorFailure, GAParams, run_search
from .fitness import CACHE_FILE, CachedFitness, FitnessCache, FitnessRecord, MetricParams
from .gateway import GatewayError, ProviderProfile, make_gateway
from .pipeline import PipelineParams, PipelineRunner, StageTrace
from .report import ComparisonReport, DomainComparison, FingerprintMismatch
from .searchspace import (
    SearchSpace,
    SearchSpaceError,
    build_default_space,
    decode,
    genome_key,
    parse_genome,
)

log = logging.getLogger("ragsearch")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_GATEWAY, EXIT_INTERRUPTED = 0, 2, 3, 4, 130


class ConfigError(ValueError):
    pass


def bundled_config() -> Path:
    return Path(str(resources.files("ragsearch") / "data" / "toy_config.json"))


@dataclass
class RunConfig:
    """Parsed run configuration. Relative dataset paths resolve against the
    config file; when ``output`` is absent the run root is ``./runs/<name>``."""

    name: str
    corpus_path: Path
    qa_path: Path
    profile: ProviderProfile
    output: Path
    ga: GAParams = field(default_factory=GAParams)
    pipeline: PipelineParams = field(default_factory=PipelineParams)
    metrics: MetricParams = field(default_factory=MetricParams)
    space: dict = field(default_factory=dict)
    cache_path: Path | None = None
    index_cache: Path | None = None
    max_question_workers: int = 1
    trace: bool = False

    @classmethod
    def load(cls, path: str | Path, out: str | Path | None = None) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        base = path.parent
        try:
            ds = raw["dataset"]
            name = ds.get("name") or Path(ds["corpus"]).stem
            corpus_path = (base / ds["corpus"]).resolve()
            qa_path = (base / ds["qa"]).resolve()
        except (KeyError, TypeError):
            raise ConfigError(f"{path}: 'dataset' needs 'corpus' and 'qa' paths") from None
        for p in (corpus_path, qa_path):
            if not p.is_file():
                raise ConfigError(f"dataset file not found: {p}")
        if out is not None:
            output = Path(out)
        elif raw.get("output"):
            output = base / raw["output"]
        else:
            output = Path("runs") / name
        try:
            profile = ProviderProfile.from_dict(raw.get("profile") or {})
            ga = GAParams.from_dict(raw.get("ga") or {})
            pipeline = PipelineParams.from_dict(raw.get("pipeline") or {})
            metrics = MetricParams(**(raw.get("metrics") or {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cache = raw.get("cache")
        index_cache = raw.get("index_cache")
        return cls(
            name=name, corpus_path=corpus_path, qa_path=qa_path, profile=profile, output=output,
            ga=ga, pipeline=pipeline, metrics=metrics, space=dict(raw.get("space") or {}),
            cache_path=(base / cache) if cache else output / "cache" / CACHE_FILE,
            index_cache=(base / index_cache) if index_cache else output / "cache" / "indexes",
            max_question_workers=int(raw.get("max_question_workers", 1)),
            trace=bool(raw.get("trace", False)),
        )

    def build_space(self) -> SearchSpace:
        try:
            return build_default_space(**self.space)
        except TypeError as exc:
            raise ConfigError(f"bad 'space' section: {exc}") from None


class Session:
    """Everything a command needs, built from a RunConfig."""

    def __init__(self, cfg: RunConfig, trace_path: Path | None = None):
        self.cfg = cfg
        self.space = cfg.build_space()
        try:
            self.dataset: Dataset = load_dataset(cfg.corpus_path, cfg.qa_path, cfg.name)
        except (CorpusError, OSError) as exc:
            raise ConfigError(f"cannot load dataset: {exc}") from exc
        self.gateway = make_gateway(cfg.profile)
        self.runner = PipelineRunner(self.dataset.corpus, self.gateway, cfg.pipeline, cfg.index_cache)
        self.cache = FitnessCache(cfg.cache_path)
        self._trace_fh = None
        if trace_path is not None:
            trace_path.parent.mkdir(parents=True, exist_ok=True)
            self._trace_fh = trace_path.open("w", encoding="utf-8")
        self.fitness = CachedFitness(self.dataset, self.runner, self.cache, cfg.metrics, self.space,
                                     cfg.max_question_workers,
                                     on_trace=self._write_trace if self._trace_fh else None)

    def _write_trace(self, key: str, trace: StageTrace) -> None:
        row = {"genome": key, **trace.to_dict(timings=False)}
        self._trace_fh.write(json.dumps(row, sort_keys=True) + "\n")
        self._trace_fh.flush()

    def close(self) -> None:
        if self._trace_fh:
            self._trace_fh.close()
        close = getattr(self.gateway, "close", None)
        if close:
            close()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _describe(space: SearchSpace, genome) -> dict:
    return {"genome": list(genome), "key": genome_key(genome), "config": decode(space, genome).as_dict()}


def _provider_note(session: Session) -> None:
    calls = dict(sorted(session.gateway.calls.items()))
    print(f"pipeline evaluations: {session.fitness.invocations}, cache hits: {session.fitness.hits}, "
          f"provider calls: {sum(calls.values())}", file=sys.stderr)


def cmd_search(cfg: RunConfig, trace: bool) -> int:
    run_dir = cfg.output / "search"
    run_dir.mkdir(parents=True, exist_ok=True)
    session = Session(cfg, run_dir / "stage_traces.jsonl" if trace else None)
    seen: list[dict] = []

    def on_generation(pop):
        seen.append({"generation": pop.generation, "best": pop.best.fitness, "genome": genome_key(pop.best.genome)})

    try:
        best, best_f, stats = run_search(session.space, cfg.ga, session.fitness, on_generation)
    except KeyboardInterrupt:
        with (run_dir / "interrupted.jsonl").open("w", encoding="utf-8") as fh:
            for row in seen:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        print(f"interrupted after {len(seen)} generations; partial log in {run_dir}", file=sys.stderr)
        return EXIT_INTERRUPTED
    finally:
        session.close()
    record = session.fitness.latest[genome_key(best)]
    _write_json(run_dir / "best_genome.json", _describe(session.space, best))
    _write_json(run_dir / "best_record.json", record.to_dict(include_timestamp=False))
    _write_json(run_dir / "stats.json", {**stats.to_dict(), "ga": cfg.ga.to_dict()})
    stats.write_log(run_dir / "trace.jsonl")
    print(json.dumps({"best": genome_key(best), "F": best_f, "run_dir": str(run_dir)}))
    _provider_note(session)
    return EXIT_OK


def _evaluate(cfg: RunConfig, genome, out_path: Path, trace: bool) -> int:
    trace_path = out_path.with_name(out_path.stem + "_traces.jsonl") if trace else None
    session = Session(cfg, trace_path)
    try:
        config = decode(session.space, genome)
        print(json.dumps({"genome": genome_key(genome), "config": config.as_dict()}, indent=2))
        record = session.fitness.record(tuple(genome))
    finally:
        session.close()
    _write_json(out_path, record.to_dict(include_timestamp=False))
    print(record.to_json(include_timestamp=False))
    _provider_note(session)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, genome_text: str, trace: bool) -> int:
    genome = parse_genome(genome_text)
    key = genome_key(genome).strip("[]").replace(",", "_")
    return _evaluate(cfg, genome, cfg.output / "eval" / f"{key}.json", trace)


def cmd_baseline(cfg: RunConfig, trace: bool) -> int:
    space = cfg.build_space()
    return _evaluate(cfg, space.baseline(), cfg.output / "baseline" / "record.json", trace)


def _read_record(path: str) -> FitnessRecord:
    try:
        return FitnessRecord.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read record {path}: {exc}") from None


def cmd_report(args) -> int:
    if args.table:
        try:
            report = ComparisonReport.from_table(json.loads(Path(args.table).read_text(encoding="utf-8")))
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read table {args.table}: {exc}") from None
    elif args.pair:
        report = ComparisonReport(DomainComparison.from_records(name, _read_record(b), _read_record(base))
                                  for name, b, base in args.pair)
    else:
        raise ConfigError("report needs --table or at least one --pair")
    md = report.to_markdown()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.md").write_text(md, encoding="utf-8")
        (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    print(md)
    return EXIT_OK


def cmd_cache(cfg: RunConfig, action: str) -> int:
    cache = FitnessCache(cfg.cache_path)
    if action == "stats":
        print(json.dumps(cache.stats(), indent=2, sort_keys=True))
    else:
        print(f"removed {cache.clear()} records from {cache.path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON (default: bundled toy fixture)")
    common.add_argument("--out", help="run root directory, overrides the config's 'output'")
    common.add_argument("--seed", type=int, help="override the search seed")
    common.add_argument("--offline", action="store_true", help="use deterministic stub providers")
    common.add_argument("--trace", action="store_true", help="write per-question stage traces")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="ragsearch", description="Genetic search over RAG pipeline configurations.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("search", parents=[common], help="run the genetic search")
    ev = sub.add_parser("eval", parents=[common], help="evaluate one genome")
    ev.add_argument("--genome", required=True, help='comma-separated genes, e.g. "0,1,0,1,1,1,0,1,1"')
    sub.add_parser("baseline", parents=[common], help="evaluate the naive baseline genome")
    rep = sub.add_parser("report", help="best-vs-baseline tables")
    rep.add_argument("--pair", nargs=3, action="append", metavar=("DOMAIN", "BEST", "BASELINE"),
                     help="record files for one domain (repeatable)")
    rep.add_argument("--table", help="JSON table of raw values")
    rep.add_argument("--out", help="directory for report.md and report.json")
    cache = sub.add_parser("cache", help="inspect or clear the fitness cache")
    cache.add_argument("action", choices=("stats", "clear"))
    cache.add_argument("--config")
    cache.add_argument("--out")
    return p


def _load(args) -> RunConfig:
    cfg = RunConfig.load(args.config or bundled_config(), getattr(args, "out", None))
    if getattr(args, "seed", None) is not None:
        cfg.ga.seed = args.seed
    if getattr(args, "offline", False):
        cfg.profile = ProviderProfile.stub(cfg.profile.seed)
    cfg.trace = cfg.trace or getattr(args, "trace", False)
    return cfg


def _gateway_cause(exc: BaseException) -> BaseException | None:
    while exc is not None:
        if isinstance(exc, GatewayError):
            return exc
        exc = exc.__cause__ or getattr(exc, "cause", None)
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * getattr(args, "verbose", 0)
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args)
        cfg = _load(args)
        if args.command == "search":
            return cmd_search(cfg, cfg.trace)
        if args.command == "eval":
            return cmd_eval(cfg, args.genome, cfg.trace)
        if args.command == "baseline":
            return cmd_baseline(cfg, cfg.trace)
        return cmd_cache(cfg, args.action)
    except (ConfigError, FingerprintMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SearchSpaceError as exc:
        print(f"error: infeasible genome: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except KeyboardInterrupt:
        return EXIT_INTERRUPTED
    except (GatewayError, EvaluatorFailure, RuntimeError) as exc:
        cause = _gateway_cause(exc)
        if cause is None:
            raise
        print(f"error: provider failure: {cause}", file=sys.stderr)
        return EXIT_GATEWAY


if __name__ == "__main__":
    sys.exit(main())

"""Best-vs-baseline comparison tables (overall, retrieval, generation).

Values are stored at full precision; rounding happens only when rendering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from statistics import fmean
from typing import Iterable, Sequence

from .fitness import FitnessRecord

OVERALL_COLUMNS = (("overall", "Overall"),)
RETRIEVAL_COLUMNS = (("retrieval", "Overall"), ("recall", "Recall@5"), ("map", "mAP"),
                     ("ndcg", "nDCG@5"), ("mrr", "MRR"))
GENERATION_COLUMNS = (("generation", "Overall"), ("llm", "LLM"), ("semantic", "Semantic"))


class FingerprintMismatch(ValueError):
    pass


def pct_delta(best: float, baseline: float) -> float:
    if baseline == 0:
        raise ZeroDivisionError("baseline value is zero")
    return (best - baseline) / baseline


def fixed(value: float, places: int = 3) -> str:
    """Half-up rounding of the shortest repr, so 0.8855 shows as 0.886."""
    # round to 12 places first to shed float noise like 0.88549999999
    exact = Decimal(repr(round(value, 12)))
    return str(exact.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


def format_delta(delta: float) -> str:
    text = fixed(delta * 100, 1)
    if not text.startswith("-"):
        text = "+" + text
    return "+0.0%" if text == "-0.0" else text + "%"


def record_values(rec: FitnessRecord) -> dict[str, float]:
    return {"overall": rec.F, "retrieval": rec.retrieval, "generation": rec.generation, **rec.metrics}


@dataclass(frozen=True)
class DomainComparison:
    domain: str
    best: dict[str, float]
    baseline: dict[str, float]

    def delta(self, column: str) -> float | None:
        if column in self.best and column in self.baseline:
            return pct_delta(self.best[column], self.baseline[column])
        return None

    @classmethod
    def from_records(cls, domain: str, best: FitnessRecord, baseline: FitnessRecord) -> "DomainComparison":
        if best.dataset_fingerprint != baseline.dataset_fingerprint:
            raise FingerprintMismatch(
                f"{domain}: best and baseline were scored on different datasets "
                f"({best.dataset_fingerprint[:12]} vs {baseline.dataset_fingerprint[:12]})")
        return cls(domain, record_values(best), record_values(baseline))


@dataclass(frozen=True)
class ComparisonReport:
    rows: tuple[DomainComparison, ...]

    def __init__(self, rows: Iterable[DomainComparison]):
        object.__setattr__(self, "rows", tuple(rows))
        if not self.rows:
            raise ValueError("report needs at least one domain")

    def average(self, column: str) -> tuple[float, float, float] | None:
        """Mean best, mean baseline and the mean of the per-domain deltas."""
        rows = [r for r in self.rows if r.delta(column) is not None]
        if not rows:
            return None
        return (fmean(r.best[column] for r in rows), fmean(r.baseline[column] for r in rows),
                fmean(r.delta(column) for r in rows))

    def _has(self, column: str) -> bool:
        return any(r.delta(column) is not None for r in self.rows)

    def overall_table(self) -> str:
        out = ["| Dataset | Best | Baseline | Improvement |", "|---|---|---|---|"]
        for r in self.rows:
            if r.delta("overall") is not None:
                out.append(f"| {r.domain} | {fixed(r.best['overall'])} | {fixed(r.baseline['overall'])} | "
                           f"{format_delta(r.delta('overall'))} |")
        if len(self.rows) > 1 and self._has("overall"):
            b, base, d = self.average("overall")
            out.append(f"| **Average** | **{fixed(b)}** | **{fixed(base)}** | **{format_delta(d)}** |")
        return "\n".join(out)

    def retrieval_table(self) -> str:
        cols = [(k, name) for k, name in RETRIEVAL_COLUMNS if self._has(k)]
        out = ["| Dataset | Method | " + " | ".join(n for _, n in cols) + " |",
               "|---|---|" + "---|" * len(cols)]
        for r in self.rows:
            out.append(f"| {r.domain} | Best | " + " | ".join(_cell(r.best, k) for k, _ in cols) + " |")
            out.append("|  | Baseline | " + " | ".join(_cell(r.baseline, k) for k, _ in cols) + " |")
            out.append("|  | %Δ | " + " | ".join(_delta_cell(r, k) for k, _ in cols) + " |")
        return "\n".join(out)

    def generation_table(self) -> str:
        cols = [(k, name) for k, name in GENERATION_COLUMNS if self._has(k)]
        head = " | ".join(f"{n} Best | {n} Baseline | {n} %Δ" for _, n in cols)
        out = [f"| Dataset | {head} |", "|---|" + "---|---|---|" * len(cols)]
        for r in self.rows:
            cells = " | ".join(f"{_cell(r.best, k)} | {_cell(r.baseline, k)} | {_delta_cell(r, k)}"
                               for k, _ in cols)
            out.append(f"| {r.domain} | {cells} |")
        return "\n".join(out)

    def to_markdown(self) -> str:
        parts = []
        if self._has("overall"):
            parts += ["## Overall", "", self.overall_table(), ""]
        if any(self._has(k) for k, _ in RETRIEVAL_COLUMNS):
            parts += ["## Retrieval", "", self.retrieval_table(), ""]
        if any(self._has(k) for k, _ in GENERATION_COLUMNS):
            parts += ["## Generation", "", self.generation_table(), ""]
        return "\n".join(parts)

    def to_dict(self) -> dict:
        columns = [k for k, _ in OVERALL_COLUMNS + RETRIEVAL_COLUMNS + GENERATION_COLUMNS]
        rows = [{"domain": r.domain, "best": r.best, "baseline": r.baseline,
                 "delta": {k: r.delta(k) for k in columns if r.delta(k) is not None}} for r in self.rows]
        average = {}
        for k in columns:
            avg = self.average(k)
            if avg is not None:
                average[k] = {"best": avg[0], "baseline": avg[1], "delta": avg[2]}
        return {"rows": rows, "average": average}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_table(cls, data: dict | Sequence[dict]) -> "ComparisonReport":
        """Build from raw values: ``{"domains": [{"domain", "best", "baseline"}]}``."""
        rows = data["domains"] if isinstance(data, dict) else data
        return cls(DomainComparison(r["domain"], {k: float(v) for k, v in r["best"].items()},
                                    {k: float(v) for k, v in r["baseline"].items()}) for r in rows)


def _cell(values: dict[str, float], column: str) -> str:
    return fixed(values[column]) if column in values else "-"


def _delta_cell(row: DomainComparison, column: str) -> str:
    d = row.delta(column)
    return format_delta(d) if d is not None else "-"

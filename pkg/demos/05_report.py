# Best-vs-baseline tables from raw per-domain values.
from ragsearch.report import ComparisonReport, format_delta, pct_delta

overall = {
    "Finance": (0.893, 0.855), "Law": (0.893, 0.863), "Math": (0.873, 0.831),
    "Medicine": (0.889, 0.872), "Defense": (0.876, 0.866), "Computer Science": (0.889, 0.832),
}
report = ComparisonReport.from_table({"domains": [
    {"domain": d, "best": {"overall": b}, "baseline": {"overall": base}} for d, (b, base) in overall.items()]})
print(report.overall_table())

# the Average row averages per-domain deltas; the delta of the averages differs
print(format_delta(report.average("overall")[2]), "vs", format_delta(pct_delta(0.886, 0.853)))

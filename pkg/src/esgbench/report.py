"""Comparison-table rendering: text, markdown and JSON, plus F1 delta rows.

Rows are grouped by domain in Env/Soc/Gov order with weighted-average
Accuracy / Precision / Recall / F1-score columns. Values render with
``round(v, 2)`` and trailing zeros dropped, matching the published layout.
Delta rows report the mean relative F1 change (percent) of each model
against a named baseline across the domains both cover.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .corpus import Domain
from .metrics import improvement_delta

DOMAIN_ORDER = [Domain.ENVIRONMENTAL, Domain.SOCIAL, Domain.GOVERNANCE]
DOMAIN_SHORT = {
    Domain.ENVIRONMENTAL: "Env",
    Domain.SOCIAL: "Soc",
    Domain.GOVERNANCE: "Gov",
}
_SHORT_TO_DOMAIN = {v: k for k, v in DOMAIN_SHORT.items()}

COLUMNS = ["Domain", "Model", "Accuracy", "Precision", "Recall", "F1-score"]


class ReportError(ValueError):
    pass


def fmt_metric(v: float) -> str:
    return f"{round(float(v), 2):g}"


@dataclass(frozen=True)
class ResultRow:
    domain: str  # short name: Env / Soc / Gov
    model: str
    accuracy: float
    precision: float
    recall: float
    f1: float

    def cells(self, with_domain: bool = True) -> list[str]:
        return [
            self.domain if with_domain else "",
            self.model,
            fmt_metric(self.accuracy),
            fmt_metric(self.precision),
            fmt_metric(self.recall),
            fmt_metric(self.f1),
        ]


def _sorted_rows(rows: list[ResultRow]) -> list[ResultRow]:
    order = {DOMAIN_SHORT[d]: i for i, d in enumerate(DOMAIN_ORDER)}
    return sorted(
        rows, key=lambda r: (order.get(r.domain, len(order)), r.domain)
    )


def table_rows(rows: list[ResultRow]) -> list[list[str]]:
    """Grouped cell grid; the domain cell prints once per group."""
    out = []
    last_domain = None
    for row in _sorted_rows(rows):
        out.append(row.cells(with_domain=row.domain != last_domain))
        last_domain = row.domain
    return out


def deltas_against(rows: list[ResultRow], baseline_model: str) -> list[dict]:
    """Mean relative F1 improvement of every other model over the baseline."""
    base_f1 = {r.domain: r.f1 for r in rows if r.model == baseline_model}
    if not base_f1:
        raise ReportError(f"no rows for baseline model {baseline_model!r}")
    models = []
    for r in rows:
        if r.model != baseline_model and r.model not in models:
            models.append(r.model)
    out = []
    for model in models:
        pairs = [
            (r.f1, base_f1[r.domain])
            for r in _sorted_rows(rows)
            if r.model == model and r.domain in base_f1
        ]
        if not pairs:
            continue
        delta = improvement_delta([p[0] for p in pairs], [p[1] for p in pairs])
        out.append(
            {
                "model": model,
                "baseline": baseline_model,
                "domains": len(pairs),
                "mean_relative_f1_change_pct": delta,
            }
        )
    return out


def render_text(rows: list[ResultRow], deltas: list[dict] | None = None) -> str:
    grid = [COLUMNS] + table_rows(rows)
    widths = [max(len(r[i]) for r in grid) for i in range(len(COLUMNS))]
    lines = []
    for i, row in enumerate(grid):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    if deltas:
        lines.append("")
        for d in deltas:
            lines.append(
                f"{d['model']} vs {d['baseline']}: "
                f"{d['mean_relative_f1_change_pct']:+.2f}% mean relative F1 "
                f"({d['domains']} domain(s))"
            )
    return "\n".join(lines) + "\n"


def render_markdown(rows: list[ResultRow], deltas: list[dict] | None = None) -> str:
    lines = ["| " + " | ".join(COLUMNS) + " |",
             "|" + "|".join(["---"] * len(COLUMNS)) + "|"]
    for cells in table_rows(rows):
        lines.append("| " + " | ".join(cells) + " |")
    if deltas:
        lines.append("")
        for d in deltas:
            lines.append(
                f"- **{d['model']}** vs **{d['baseline']}**: "
                f"{d['mean_relative_f1_change_pct']:+.2f}% mean relative F1"
            )
    return "\n".join(lines) + "\n"


def to_json(rows: list[ResultRow], deltas: list[dict] | None = None) -> str:
    payload = {
        "rows": [
            {
                "domain": r.domain,
                "model": r.model,
                "accuracy": r.accuracy,
                "precision": r.precision,
                "recall": r.recall,
                "f1": r.f1,
            }
            for r in _sorted_rows(rows)
        ],
        "deltas": deltas or [],
    }
    return json.dumps(payload, indent=2)


def rows_from_json(text: str) -> list[ResultRow]:
    payload = json.loads(text)
    return [
        ResultRow(
            domain=r["domain"],
            model=r["model"],
            accuracy=r["accuracy"],
            precision=r["precision"],
            recall=r["recall"],
            f1=r["f1"],
        )
        for r in payload["rows"]
    ]


def short_domain(domain: Domain | str) -> str:
    if isinstance(domain, Domain):
        return DOMAIN_SHORT[domain]
    if domain in _SHORT_TO_DOMAIN:
        return domain
    return DOMAIN_SHORT[Domain.from_alias(domain)]

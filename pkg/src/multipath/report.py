"""Summaries across run variants: mean, s.e.m., max and Welch t-test p-values."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .evolution import sem


def welch_p_value(a, b) -> float | None:
    """Two-sided p-value of the two-sample t-test with Welch correction.

    ``None`` when either sample has fewer than 2 values.  Equal constant
    samples give 1.0 and distinct constant samples give 0.0, the limits
    scipy leaves undefined.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        return None
    if a.var() == 0 and b.var() == 0:
        return 1.0 if a.mean() == b.mean() else 0.0
    p = stats.ttest_ind(a, b, equal_var=False).pvalue
    return 1.0 if math.isnan(p) else float(p)


@dataclass
class VariantSummary:
    name: str
    values: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def sem(self) -> float:
        return sem(self.values)

    @property
    def max(self) -> float:
        return float(np.max(self.values))


def summary_table(variants: list[VariantSummary], reference: str | None = None) -> str:
    """Plain-text table: variant, mean ± s.e.m., max and, when every variant
    has at least 2 runs, the p-value against ``reference`` (first variant by
    default)."""
    if not variants:
        return "no runs\n"
    ref = next((v for v in variants if v.name == reference), variants[0])
    with_p = all(len(v.values) >= 2 for v in variants)
    width = max(len(v.name) for v in variants) + 2
    head = f"{'variant':<{width}}{'n':>3}  {'test acc mean ±s.e.m.':>22}  {'max':>7}"
    if with_p:
        head += f"  {'p-value':>9}"
    lines = [head, "-" * len(head)]
    for v in variants:
        row = f"{v.name:<{width}}{len(v.values):>3}  {100 * v.mean:>13.2f} ±{100 * v.sem:>6.2f}  {100 * v.max:>7.2f}"
        if with_p:
            p = welch_p_value(v.values, ref.values)
            row += f"  {'-' if v is ref else f'{p:9.3g}':>9}"
        lines.append(row)
    if not with_p:
        lines.append("p-values omitted: a variant has fewer than 2 runs")
    else:
        lines.append(f"p-values: Welch two-sample t-test against {ref.name}")
    return "\n".join(lines) + "\n"


def read_tsv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh, delimiter="\t")]


def _parse(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def collect_variants(run_dirs) -> list[VariantSummary]:
    """One summary per run directory from its per-replica final test accuracies."""
    out = []
    for d in map(Path, run_dirs):
        rows = read_tsv(d / "replicas.tsv")
        last = {}
        for row in rows:
            last[row["replica"]] = row
        out.append(VariantSummary(d.name, [r["best_test"] for _, r in sorted(last.items())]))
    return out

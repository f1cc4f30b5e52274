"""Tables, relative-change lines and accuracy-vs-count scatter plots for finished experiments."""

from __future__ import annotations

from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .metrics import ExperimentSummary, RegressionLine, fit_regression, relative_change

SUMMARY_HEADER = ("model", "scope", "category", "bias", "var")


def summary_rows(summaries: Sequence[ExperimentSummary]) -> list[tuple]:
    return [(m, s, c, f"{b:.4f}", f"{v:.4f}") for summary in summaries for m, s, c, b, v in summary.rows()]


def comparison(baseline: ExperimentSummary, other: ExperimentSummary) -> list[dict]:
    """Percent change of bias and variance for both aggregation levels."""
    out = []
    pairs = {
        "categories": ((baseline.categories_bias, baseline.categories_var),
                       (other.categories_bias, other.categories_var)),
        "samples": ((baseline.samples_bias, baseline.samples_var),
                    (other.samples_bias, other.samples_var)),
    }
    for scope, ((b0, v0), (b1, v1)) in pairs.items():
        for stat, before, after in (("bias", b0, b1), ("var", v0, v1)):
            change = relative_change(before, after) if before != 0 else float("nan")
            out.append({
                "baseline": baseline.model, "model": other.model, "scope": scope, "statistic": stat,
                "before": round(before, 4), "after": round(after, 4), "percent_change": round(change, 2),
            })
    return out


def change_lines(changes: Sequence[dict]) -> list[str]:
    lines = []
    for c in changes:
        verb = "increases" if c["percent_change"] >= 0 else "reduces"
        lines.append(
            f"{c['model']} vs {c['baseline']} ({c['scope']}): {c['statistic']} {verb} "
            f"{abs(c['percent_change']):.2f}%, from {c['before']:.4f} to {c['after']:.4f}"
        )
    return lines


def regressions(summaries: Sequence[ExperimentSummary], counts) -> dict[str, RegressionLine]:
    return {s.model: fit_regression(counts, s.category_bias) for s in summaries}


def report_document(summaries: Sequence[ExperimentSummary], counts, header: Mapping | None = None) -> dict:
    lines = regressions(summaries, counts)
    changes = []
    base = summaries[0]
    for other in summaries[1:]:
        changes += comparison(base, other)
    return {
        "header": dict(header or {}),
        "summaries": [s.to_dict() for s in summaries],
        "relative_change": changes,
        "regression": {m: {"slope": r.slope, "intercept": r.intercept} for m, r in lines.items()},
        "train_counts": [float(c) for c in counts],
    }


def scatter_svg(summary: ExperimentSummary, counts, line: RegressionLine,
                width: int = 480, height: int = 360) -> str:
    """Category accuracy against training count, one labeled point per category."""
    counts = np.asarray(counts, dtype=np.float64)
    acc = np.asarray(summary.category_bias, dtype=np.float64)
    left, right, top, bottom = 56, 20, 36, 44
    x_max = float(counts.max()) * 1.08 or 1.0
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + pw * x / x_max

    def py(y):
        return top + ph * (1 - min(max(y, 0.0), 1.0))

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">'
        f'{escape(summary.model)}: category accuracy by training samples '
        f'(y = {line.slope:.3g} x + {line.intercept:.2f})</text>',
        f'<path class="axes" d="M{left} {top} V{top + ph} H{left + pw}" stroke="black" fill="none"/>',
    ]
    for t in np.linspace(0, 1, 6):
        out.append(f'<text class="tick" x="{left - 6}" y="{py(t) + 4:.1f}" text-anchor="end" '
                   f'font-size="10">{t:.1f}</text>')
    for t in np.linspace(0, x_max, 5):
        out.append(f'<text class="tick" x="{px(t):.1f}" y="{top + ph + 14}" text-anchor="middle" '
                   f'font-size="10">{t:.0f}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="11">'
               f'training samples</text>')
    out.append(f'<line class="regression" x1="{px(0):.2f}" y1="{py(line(0.0)):.2f}" '
               f'x2="{px(x_max):.2f}" y2="{py(line(x_max)):.2f}" stroke="firebrick" stroke-width="1.5"/>')
    for name, x, y in zip(summary.category_names, counts, acc):
        out.append(f'<circle class="point" cx="{px(x):.2f}" cy="{py(y):.2f}" r="4" fill="steelblue">'
                   f'<title>{escape(name)}</title></circle>')
        out.append(f'<text class="label" x="{px(x) + 6:.2f}" y="{py(y) - 6:.2f}" font-size="10">'
                   f'{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

"""Confusion matrices, standard/balanced accuracy and multi-run bias-variance summaries."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class MetricsError(ValueError):
    pass


def confusion_matrix(predictions, labels, num_categories: int) -> np.ndarray:
    """K x K counts indexed by (true, predicted)."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise MetricsError(f"{predictions.size} predictions but {labels.size} labels")
    for name, arr in (("prediction", predictions), ("label", labels)):
        bad = np.flatnonzero((arr < 0) | (arr >= num_categories))
        if bad.size:
            raise MetricsError(f"{name} {arr[bad[0]]} at index {bad[0]} outside [0, {num_categories})")
    flat = np.bincount(labels * num_categories + predictions, minlength=num_categories ** 2)
    return flat.reshape(num_categories, num_categories)


def per_category_accuracy(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm)
    rows = cm.sum(axis=1)
    empty = np.flatnonzero(rows == 0)
    if empty.size:
        raise MetricsError(f"category {empty[0]} has no evaluation samples; balanced accuracy undefined")
    return np.diag(cm) / rows


def balanced_accuracy(cm: np.ndarray) -> float:
    """Mean over categories of correctly classified / category size."""
    return float(per_category_accuracy(cm).mean())


def standard_accuracy(cm: np.ndarray) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise MetricsError("empty confusion matrix")
    return float(np.trace(cm) / total)


@dataclass
class ExperimentSummary:
    """Mean ("bias") and variance of accuracies across repeated runs."""

    model: str
    runs: int
    category_bias: np.ndarray
    category_var: np.ndarray
    samples_bias: float
    samples_var: float
    categories_bias: float
    categories_var: float
    ddof: int = 0
    category_names: tuple[str, ...] = field(default=())

    def rows(self) -> list[tuple[str, str, str, float, float]]:
        """(model, scope, category, bias, var) rows; category is '' for aggregates."""
        out = [(self.model, "category", name, float(b), float(v))
               for name, b, v in zip(self.category_names, self.category_bias, self.category_var)]
        out.append((self.model, "samples", "", self.samples_bias, self.samples_var))
        out.append((self.model, "categories", "", self.categories_bias, self.categories_var))
        return out

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "runs": self.runs,
            "variance_divisor": "R" if self.ddof == 0 else "R-1",
            "categories": [
                {"category": n, "bias": float(b), "var": float(v)}
                for n, b, v in zip(self.category_names, self.category_bias, self.category_var)
            ],
            "samples": {"bias": self.samples_bias, "var": self.samples_var},
            "balanced": {"bias": self.categories_bias, "var": self.categories_var},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSummary":
        cats = d["categories"]
        return cls(
            model=d["model"], runs=d["runs"],
            category_bias=np.array([c["bias"] for c in cats]),
            category_var=np.array([c["var"] for c in cats]),
            samples_bias=d["samples"]["bias"], samples_var=d["samples"]["var"],
            categories_bias=d["balanced"]["bias"], categories_var=d["balanced"]["var"],
            ddof=0 if d.get("variance_divisor", "R") == "R" else 1,
            category_names=tuple(c["category"] for c in cats),
        )


def aggregate_runs(category_accuracies, standard_accuracies, model: str = "",
                   category_names: Sequence[str] = (), ddof: int = 0) -> ExperimentSummary:
    """Summarize an R x K matrix of per-run category accuracies.

    ``ddof=0`` divides the variance by R (population variance), ``ddof=1`` by R-1.
    The balanced row is computed from each run's balanced accuracy.
    """
    acc = np.asarray(category_accuracies, dtype=np.float64)
    std = np.asarray(standard_accuracies, dtype=np.float64)
    if acc.ndim != 2 or acc.shape[0] < 2:
        raise MetricsError(f"need at least 2 runs, got category matrix of shape {acc.shape}")
    if std.shape != (acc.shape[0],):
        raise MetricsError(f"{std.size} standard accuracies for {acc.shape[0]} runs")
    if ddof not in (0, 1):
        raise MetricsError("ddof must be 0 or 1")
    balanced = acc.mean(axis=1)
    names = tuple(category_names) or tuple(str(i) for i in range(acc.shape[1]))
    return ExperimentSummary(
        model=model, runs=acc.shape[0],
        category_bias=acc.mean(axis=0), category_var=acc.var(axis=0, ddof=ddof),
        samples_bias=float(std.mean()), samples_var=float(std.var(ddof=ddof)),
        categories_bias=float(balanced.mean()), categories_var=float(balanced.var(ddof=ddof)),
        ddof=ddof, category_names=names,
    )


def relative_change(before: float, after: float) -> float:
    """Percent change from ``before`` to ``after``."""
    if before == 0:
        raise MetricsError("relative change from zero is undefined")
    return 100.0 * (after - before) / before


@dataclass(frozen=True)
class RegressionLine:
    slope: float
    intercept: float

    def __call__(self, x):
        return self.slope * np.asarray(x, dtype=np.float64) + self.intercept


def fit_regression(x, y) -> RegressionLine:
    """Ordinary least squares line through (x, y) from the normal equations."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricsError(f"x {x.shape} and y {y.shape} must be equal-length vectors")
    if np.unique(x).size < 2:
        raise MetricsError("regression needs at least two distinct x values")
    xm, ym = x.mean(), y.mean()
    slope = np.sum((x - xm) * (y - ym)) / np.sum((x - xm) ** 2)
    return RegressionLine(float(slope), float(ym - slope * xm))

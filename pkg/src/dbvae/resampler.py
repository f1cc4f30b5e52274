"""Latent-density resampling: rare encodings get drawn more often.

The training set is pushed through the encoder, one histogram is fitted per
latent dimension of the means, and each sample's selection probability is
made inversely proportional to the (smoothed) mass of the bins it falls in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ResamplerError(ValueError):
    pass


@dataclass(frozen=True)
class LatentHistogram:
    dimension: int
    lo: float
    hi: float
    masses: np.ndarray

    @property
    def bin_count(self) -> int:
        return len(self.masses)

    def bin_index(self, values: np.ndarray) -> np.ndarray:
        """Bin of each value; values outside [lo, hi] clamp to the edge bins."""
        scaled = (np.asarray(values, dtype=np.float64) - self.lo) / (self.hi - self.lo)
        idx = np.floor(scaled * self.bin_count).astype(np.int64)
        return np.clip(idx, 0, self.bin_count - 1)

    def mass_of(self, values: np.ndarray) -> np.ndarray:
        return self.masses[self.bin_index(values)]


def fit_histograms(mu: np.ndarray, bin_count: int = 10,
                   value_range: tuple[float, float] | None = None) -> list[LatentHistogram]:
    """One normalized histogram per latent dimension of ``mu`` [N, D].

    By default the range of each dimension is its [min, max] widened by 1e-6
    on both sides; ``value_range`` forces a fixed range for every dimension.
    """
    mu = np.asarray(mu, dtype=np.float64)
    if mu.ndim != 2 or mu.shape[0] < 2:
        raise ResamplerError(f"need at least 2 samples of shape [N, D], got {mu.shape}")
    if bin_count < 1:
        raise ResamplerError(f"bin_count must be >= 1, got {bin_count}")
    n = mu.shape[0]
    hists = []
    for d in range(mu.shape[1]):
        col = mu[:, d]
        if value_range is None:
            lo, hi = float(col.min()) - 1e-6, float(col.max()) + 1e-6
        else:
            lo, hi = map(float, value_range)
        if not lo < hi:
            raise ResamplerError(f"empty histogram range [{lo}, {hi}]")
        h = LatentHistogram(d, lo, hi, np.zeros(bin_count))
        counts = np.bincount(h.bin_index(col), minlength=bin_count)
        hists.append(LatentHistogram(d, lo, hi, counts / n))
    return hists


def sample_weights(histograms: Sequence[LatentHistogram], mu: np.ndarray, alpha: float = 1e-3,
                   mode: str = "product") -> np.ndarray:
    """Selection probability per sample, proportional to combined ``1 / (mass + alpha)``.

    ``product`` multiplies the per-dimension factors (an independence
    approximation of the joint density); ``max`` keeps the largest factor.
    """
    if alpha < 0:
        raise ResamplerError(f"alpha must be >= 0, got {alpha}")
    mu = np.asarray(mu, dtype=np.float64)
    if mu.ndim != 2 or mu.shape[1] != len(histograms):
        raise ResamplerError(f"mu shape {mu.shape} does not match {len(histograms)} histograms")
    masses = np.stack([h.mass_of(mu[:, h.dimension]) for h in histograms], axis=1)
    with np.errstate(divide="ignore"):
        log_factor = -np.log(masses + alpha)
    if mode == "product":
        log_w = log_factor.sum(axis=1)
    elif mode == "max":
        log_w = log_factor.max(axis=1)
    else:
        raise ResamplerError(f"unknown mode {mode!r}")
    # normalize in log space: the product over many dimensions overflows
    log_w = log_w - log_w.max()
    w = np.exp(log_w)
    return w / w.sum()


def distribution_entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def draw_batch(dist: np.ndarray, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """``batch_size`` independent draws with replacement."""
    dist = np.asarray(dist, dtype=np.float64)
    if dist.size == 0:
        raise ResamplerError("cannot draw from an empty distribution")
    if batch_size < 1:
        raise ResamplerError(f"batch_size must be >= 1, got {batch_size}")
    cdf = np.cumsum(dist)
    u = rng.random(batch_size) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, dist.size - 1)


@dataclass(frozen=True)
class ResampleSchedule:
    """When to refit histograms: every ``every`` epochs, or never if disabled."""

    every: int = 1
    enabled: bool = True

    def __call__(self, epoch: int) -> bool:
        return self.enabled and epoch % self.every == 0


def recompute_schedule(epoch: int, schedule: ResampleSchedule = ResampleSchedule()) -> bool:
    return schedule(epoch)


def uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)

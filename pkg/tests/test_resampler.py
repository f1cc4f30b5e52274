import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dbvae.resampler import (
    LatentHistogram,
    ResampleSchedule,
    ResamplerError,
    distribution_entropy,
    draw_batch,
    fit_histograms,
    recompute_schedule,
    sample_weights,
    uniform,
)


def test_histogram_hand_count():
    mu = np.array([[0.05], [0.15], [0.25], [0.95]])
    (h,) = fit_histograms(mu, bin_count=2, value_range=(0.0, 1.0))
    np.testing.assert_allclose(h.masses, [0.75, 0.25])


def test_default_range_covers_extremes():
    mu = np.array([[0.0], [1.0], [0.5]])
    (h,) = fit_histograms(mu, bin_count=10)
    assert h.lo < 0 and h.hi > 1
    assert h.masses[0] > 0 and h.masses[-1] > 0
    assert h.masses.sum() == pytest.approx(1.0)


def test_out_of_range_values_clamp_to_edges():
    (h,) = fit_histograms(np.array([[0.2], [0.8]]), bin_count=4, value_range=(0.0, 1.0))
    np.testing.assert_array_equal(h.bin_index(np.array([-5.0, 7.0])), [0, 3])


def test_weights_invert_bin_mass():
    hist = LatentHistogram(0, 0.0, 1.0, np.array([0.9, 0.1]))
    p = sample_weights([hist], np.array([[0.1], [0.9]]), alpha=0.0)
    np.testing.assert_allclose(p, [0.1, 0.9], atol=1e-15)


def test_crowded_bins_share_equal_total():
    mu = np.array([[0.1]] * 9 + [[0.9]])
    p = sample_weights(fit_histograms(mu, bin_count=2, value_range=(0.0, 1.0)), mu, alpha=0.0)
    assert p[:9].sum() == pytest.approx(0.5)
    assert p[9] == pytest.approx(0.5)


@pytest.mark.parametrize("mode", ["product", "max"])
def test_huge_alpha_is_uniform(mode):
    mu = np.random.default_rng(0).normal(size=(200, 8))
    p = sample_weights(fit_histograms(mu), mu, alpha=1e9, mode=mode)
    assert np.max(np.abs(p - 1 / 200)) < 1e-6


def test_identical_latents_get_identical_probability():
    r = np.random.default_rng(1)
    mu = r.normal(size=(50, 4))
    mu[7] = mu[31]
    p = sample_weights(fit_histograms(mu), mu)
    assert p[7] == p[31]


@pytest.mark.parametrize("mode", ["product", "max"])
def test_normalized_on_random_instances(mode):
    for seed in range(100):
        r = np.random.default_rng(seed)
        mu = r.normal(size=(int(r.integers(2, 300)), int(r.integers(1, 33)))) * r.uniform(0.1, 5)
        p = sample_weights(fit_histograms(mu, int(r.integers(1, 20))), mu, alpha=10 ** r.uniform(-6, 1), mode=mode)
        assert abs(p.sum() - 1) < 1e-9
        assert np.all(p > 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_product_weight_decreases_with_mass(seed):
    r = np.random.default_rng(seed)
    mu = r.normal(size=(100, 3))
    hists = fit_histograms(mu)
    p = sample_weights(hists, mu, mode="product")
    masses = np.stack([h.mass_of(mu[:, h.dimension]) for h in hists], axis=1)
    # if sample i's bins are all at least as crowded as j's, i is no more likely than j
    dominates = np.all(masses[:, None, :] >= masses[None, :, :], axis=2)
    i, j = np.nonzero(dominates)
    assert np.all(p[i] <= p[j] * (1 + 1e-12))


@pytest.mark.parametrize("mode", ["product", "max"])
def test_planted_rarity(mode):
    r = np.random.default_rng(2)
    dense = r.normal(0, 0.1, size=(1000, 4))
    rare = r.normal(0, 0.1, size=(10, 4)) + 6.0
    mu = np.concatenate([dense, rare])
    p = sample_weights(fit_histograms(mu), mu, alpha=1e-3, mode=mode)
    assert p[1000:].mean() >= 10 * p[:1000].mean()


def test_product_survives_many_dimensions():
    mu = np.random.default_rng(3).normal(size=(500, 256))
    p = sample_weights(fit_histograms(mu), mu, alpha=1e-9)
    assert np.all(np.isfinite(p)) and abs(p.sum() - 1) < 1e-9


def test_input_validation():
    with pytest.raises(ResamplerError):
        fit_histograms(np.zeros((1, 3)))
    mu = np.random.default_rng(4).normal(size=(10, 2))
    with pytest.raises(ResamplerError):
        sample_weights(fit_histograms(mu), mu, alpha=-1)
    with pytest.raises(ResamplerError):
        sample_weights(fit_histograms(mu), mu, mode="mean")
    with pytest.raises(ResamplerError):
        sample_weights(fit_histograms(mu), mu[:, :1])


def test_entropy():
    assert distribution_entropy(uniform(8)) == pytest.approx(np.log(8))
    assert distribution_entropy(np.array([1.0, 0.0])) == 0.0


# ---------------------------------------------------------------- draws


def test_point_mass_always_drawn():
    p = np.zeros(20)
    p[13] = 1.0
    assert np.all(draw_batch(p, 500, np.random.default_rng(5)) == 13)


def test_uniform_draw_frequencies():
    n = 10
    idx = draw_batch(uniform(n), 10**6, np.random.default_rng(6))
    freq = np.bincount(idx, minlength=n) / 10**6
    assert np.max(np.abs(freq - 1 / n)) < 0.01 * (1 / n)


def test_weighted_draw_frequencies():
    p = np.array([0.5, 0.3, 0.15, 0.05])
    freq = np.bincount(draw_batch(p, 10**6, np.random.default_rng(7)), minlength=4) / 10**6
    np.testing.assert_allclose(freq, p, atol=0.005)


def test_draw_is_deterministic_and_in_range():
    p = np.random.default_rng(8).random(37)
    p /= p.sum()
    a = draw_batch(p, 64, np.random.default_rng(9))
    b = draw_batch(p, 64, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0 and a.max() < 37 and a.shape == (64,)


def test_draw_errors():
    with pytest.raises(ResamplerError):
        draw_batch(np.array([]), 4, np.random.default_rng(0))
    with pytest.raises(ResamplerError):
        draw_batch(uniform(3), 0, np.random.default_rng(0))


# ---------------------------------------------------------------- schedule


def test_schedule():
    assert all(recompute_schedule(e) for e in range(5))
    every3 = ResampleSchedule(every=3)
    assert [e for e in range(10) if every3(e)] == [0, 3, 6, 9]
    assert not any(ResampleSchedule(enabled=False)(e) for e in range(5))

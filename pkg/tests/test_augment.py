import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from spira_xai.augment import (MixupConfig, SpecAugmentConfig, draw_lambda, draw_masks, mixup,
                               spec_augment)
from spira_xai.dsp import SET1, MelSpectrogram


def _mel(rng=None, shape=(80, 401)):
    rng = rng or np.random.default_rng(0)
    return MelSpectrogram(rng.normal(-5, 2, shape), SET1)


def test_mixup_endpoints_exact():
    xi, xj = np.array([[2.0, 4.0]]), np.array([[0.0, 2.0]])
    yi, yj = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    x, y = mixup(xi, yi, xj, yj, 1.0)
    assert np.array_equal(x, xi) and np.array_equal(y, yi)
    x, y = mixup(xi, yi, xj, yj, 0.0)
    assert np.array_equal(x, xj) and np.array_equal(y, yj)
    x, y = mixup(xi, yi, xj, yj, 0.5)
    assert np.array_equal(x, [[1.0, 3.0]]) and np.array_equal(y, [0.5, 0.5])


def test_mixup_errors():
    with pytest.raises(ValueError):
        mixup(np.zeros(2), np.zeros(2), np.zeros(3), np.zeros(2), 0.5)
    with pytest.raises(ValueError):
        mixup(np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2), 1.5)
    with pytest.raises(ValueError):
        MixupConfig(0.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)),
       st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_mixup_convexity(xi, xj, lam, pi, pj):
    yi, yj = np.array([pi, 1 - pi]), np.array([pj, 1 - pj])
    x, y = mixup(xi, yi, xj, yj, lam)
    tol = 1e-9 * (1 + np.abs(xi) + np.abs(xj))
    assert np.all(x >= np.minimum(xi, xj) - tol) and np.all(x <= np.maximum(xi, xj) + tol)
    assert y.sum() == pytest.approx(1.0)


def test_lambda_distribution():
    rng = np.random.default_rng(0)
    lam = np.array([draw_lambda(MixupConfig(0.2), rng) for _ in range(100_000)])
    assert lam.min() >= 0 and lam.max() <= 1
    assert abs(lam.mean() - 0.5) <= 0.01


def test_lambda_alpha_one_is_uniform():
    rng = np.random.default_rng(1)
    lam = [draw_lambda(MixupConfig(1.0), rng) for _ in range(5000)]
    assert stats.kstest(lam, "uniform").pvalue > 0.01


def test_empty_masks_identity():
    mel = _mel()
    out = spec_augment(mel, SpecAugmentConfig(0, 0), np.random.default_rng(0))
    assert np.array_equal(out.values, mel.values)


def test_mask_height_bounded_and_inside():
    rng = np.random.default_rng(2)
    for _ in range(500):
        for axis, start, width in draw_masks(80, 401, SpecAugmentConfig(8, 20), rng):
            limit, size = (8, 80) if axis == 0 else (20, 401)
            assert 0 <= width <= limit
            assert 0 <= start and start + width <= size


def test_mask_width_uniform():
    rng = np.random.default_rng(3)
    widths = [draw_masks(80, 401, SpecAugmentConfig(8, 20, 1, 0), rng)[0][2] for _ in range(10_000)]
    counts = np.bincount(widths, minlength=9)
    assert len(counts) == 9
    assert stats.chisquare(counts).pvalue > 0.01


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 8), st.integers(0, 20),
       st.integers(0, 3), st.integers(0, 3))
def test_unmasked_cells_bit_identical(seed, F, T, nf, nt):
    mel = _mel(np.random.default_rng(seed))
    before = mel.values.copy()
    cfg = SpecAugmentConfig(F, T, nf, nt)
    out, masks = spec_augment(mel, cfg, np.random.default_rng(seed), return_masks=True)
    assert np.array_equal(mel.values, before)
    touched = np.zeros(mel.shape, bool)
    for axis, start, width in masks:
        if axis == 0:
            touched[start:start + width] = True
        else:
            touched[:, start:start + width] = True
    assert np.array_equal(out.values[~touched], before[~touched])
    assert np.all(out.values[touched] == before.mean())
    again = spec_augment(mel, cfg, np.random.default_rng(seed))
    assert np.array_equal(again.values, out.values)


def test_config_check():
    with pytest.raises(ValueError):
        spec_augment(_mel(shape=(8, 401)), SpecAugmentConfig(8, 20), np.random.default_rng(0))

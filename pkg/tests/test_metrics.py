import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfcl.losses import FeatureExtractor
from mfcl.metrics import (FEAT_DIST_NOTE, ImageScore, MetricReport, feat_dist, frechet_distance, mae,
                          psnr, ssim)

from oracles import ssim_windows


def test_psnr_identical_is_infinite(rng):
    a = rng.uniform(size=(8, 8, 3))
    assert psnr(a, a) == math.inf


def test_psnr_closed_forms():
    a = np.zeros((4, 4, 3))
    assert abs(psnr(a, a + 0.5) - 10 * math.log10(4)) <= 1e-6
    assert abs(psnr(a, a + 0.1) - 20.0) <= 1e-6
    assert abs(psnr(a, a + 0.5) - 6.0206) <= 1e-4


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_ssim_identity(rng):
    for _ in range(3):
        a = rng.uniform(size=(3, 16, 20))
        assert abs(ssim(a, a) - 1.0) <= 1e-9


def test_ssim_constant_half():
    a = np.full((3, 12, 12), 0.5)
    assert ssim(a, 1 - a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_window_oracle(rng):
    a = rng.uniform(size=(14, 13, 3))
    b = np.clip(a + rng.normal(0, 0.2, size=a.shape), 0, 1)
    assert abs(ssim(a.transpose(2, 0, 1), b.transpose(2, 0, 1)) - ssim_windows(a, b)) <= 1e-8


def test_ssim_too_small():
    with pytest.raises(ValueError, match="smaller than"):
        ssim(np.zeros((3, 10, 10)), np.zeros((3, 10, 10)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_symmetry_and_triangle(seed):
    r = np.random.default_rng(seed)
    a, b, c = (r.uniform(size=(3, 12, 12)) for _ in range(3))
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
    assert mae(a, c) <= mae(a, b) + mae(b, c) + 1e-15


def test_mae_identity(rng):
    a = rng.uniform(size=(5, 5))
    assert mae(a, a) == 0.0


def test_frechet_point_masses():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        d = frechet_distance(np.zeros((2, 1)), np.ones((2, 1)))
    assert d == pytest.approx(1.0, abs=1e-9)


def test_frechet_degenerate_warns():
    with pytest.warns(RuntimeWarning, match="degenerate"):
        frechet_distance(np.zeros((2, 3)), np.zeros((2, 3)))


def test_frechet_gaussian_closed_form(rng):
    x = rng.normal(size=(400, 1))
    y = 2.0 + 3.0 * rng.normal(size=(400, 1))
    m1, m2 = x.mean(), y.mean()
    s1, s2 = x.std(ddof=1), y.std(ddof=1)
    expected = (m1 - m2) ** 2 + (s1 - s2) ** 2
    assert frechet_distance(x, y) == pytest.approx(expected, rel=1e-9)


def test_frechet_needs_two_samples():
    with pytest.raises(ValueError, match="at least 2"):
        frechet_distance(np.zeros((1, 2)), np.zeros((3, 2)))


def test_feat_dist_identical_sets(rng):
    fx = FeatureExtractor(channels=(4, 4, 4, 4, 4), seed=0)
    imgs = rng.uniform(size=(3, 3, 16, 16))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        assert feat_dist(imgs, imgs, fx) <= 1e-6
    assert "non-comparable" in FEAT_DIST_NOTE


def test_report_means_are_order_independent():
    rows = [ImageScore("a", 20.0, 0.5, 0.1), ImageScore("b", 30.0, 0.9, 0.2)]
    a = MetricReport.from_scores(rows)
    b = MetricReport.from_scores(rows[::-1])
    assert (a.psnr, a.ssim, a.mae, a.n_images) == (b.psnr, b.ssim, b.mae, 2)
    assert a.psnr == 25.0
    with pytest.raises(ValueError):
        MetricReport.from_scores([])

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from invoxel.metrics import PSNR_CAP, MetricsReport, psnr, ssim


def test_psnr_known_values(rng):
    a = rng.uniform(0, 1, (8, 8, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0)
    b = rng.uniform(0, 1, a.shape)
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ValueError, match="shapes differ"):
        psnr(a, a[:4])


def test_ssim_identity_and_symmetry(rng):
    a = rng.uniform(0, 1, (20, 24, 3))
    b = rng.uniform(0, 1, (20, 24, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_constant_images_closed_form():
    # flat images: variances and covariance vanish, only the luminance term remains
    x, y, c1 = 0.3, 0.7, 0.01 ** 2
    want = (2 * x * y + c1) / (x * x + y * y + c1)
    assert ssim(np.full((16, 16), x), np.full((16, 16), y)) == pytest.approx(want, abs=1e-12)


def test_ssim_negative_image_scores_low(rng):
    a = rng.uniform(0, 1, (32, 32))
    assert ssim(a, 1.0 - a) < 0.5


def test_ssim_matches_skimage(rng):
    a = rng.uniform(0, 1, (30, 26, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ref = structural_similarity(a.mean(-1), b.mean(-1), data_range=1.0, gaussian_weights=True,
                                sigma=1.5, use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-12)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((8, 20)), np.zeros((8, 20)))


def test_report_means_and_json_roundtrip(rng):
    pairs = {}
    for name in ("view_b", "view_a", "view_c"):
        a = rng.uniform(0, 1, (16, 16, 3))
        pairs[name] = (a, np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1))
    rep = MetricsReport.build(pairs, config_digest="ab" * 32, iteration=7)
    assert rep.views == ["view_a", "view_b", "view_c"]
    assert rep.mean_psnr == pytest.approx(np.mean(rep.psnr))
    assert rep.mean_ssim == pytest.approx(np.mean(rep.ssim))
    assert rep.psnr[0] == psnr(*pairs["view_a"])
    assert MetricsReport.from_json(rep.to_json()) == rep


def test_ssim_black_vs_white_and_frozen_gradient_value():
    c1 = 0.01 ** 2
    assert ssim(np.zeros((12, 12)), np.ones((12, 12))) == pytest.approx(c1 / (1 + c1), abs=1e-12)
    i, j = np.mgrid[0:16, 0:16]
    ramp = (i + 2 * j) / 45.0
    assert ssim(ramp, 1.0 - ramp) == pytest.approx(-0.8035821768756474, abs=1e-12)

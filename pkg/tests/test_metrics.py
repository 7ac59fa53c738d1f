import math

import numpy as np
import pytest
from scipy import ndimage
from skimage.metrics import structural_similarity

from rddpm.metrics import MetricsReport, enl, epi, evaluate, psnr, seam_ratio, ssim, to_intensity


def test_psnr_identical_is_infinite():
    a = np.random.default_rng(0).random((8, 8))
    assert psnr(a, a) == math.inf


def test_psnr_constant_error():
    a = np.zeros((16, 16))
    assert psnr(a, a + 0.1, peak=1.0) == pytest.approx(20.0, abs=1e-12)


def test_psnr_single_pixel():
    a = np.zeros((8, 8))
    b = a.copy()
    b[3, 4] = 1.0
    assert psnr(a, b) == pytest.approx(10 * math.log10(64), abs=1e-12)
    assert round(psnr(a, b), 4) == 18.0618


def test_psnr_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(3), peak=0)


def test_ssim_identity_and_anticorrelation():
    a = np.random.default_rng(1).random((64, 64))
    assert ssim(a, a) == 1.0
    assert ssim(a, 1 - a) < 0.3


def test_ssim_matches_skimage():
    rng = np.random.default_rng(2)
    for k in range(3):
        a = ndimage.gaussian_filter(rng.random((64, 64)), 1 + k)
        b = np.clip(a + rng.normal(0, 0.05 * (k + 1), a.shape), 0, 1)
        want = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                     use_sample_covariance=False)
        assert abs(ssim(a, b) - want) < 1e-4


def test_ssim_multichannel_is_channel_mean():
    rng = np.random.default_rng(3)
    a, b = rng.random((32, 32, 2)), rng.random((32, 32, 2))
    assert ssim(a, b) == pytest.approx(np.mean([ssim(a[..., i], b[..., i]) for i in range(2)]))


def test_ssim_small_image_falls_back_to_global():
    rng = np.random.default_rng(4)
    a = rng.random((5, 5))
    b = a * 0.5 + 0.2
    v = ssim(a, b)
    assert -1 <= v <= 1
    mu_a, mu_b = a.mean(), b.mean()
    cov = np.mean((a - mu_a) * (b - mu_b))
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    want = (2 * mu_a * mu_b + c1) * (2 * cov + c2) / ((mu_a ** 2 + mu_b ** 2 + c1) * (a.var() + b.var() + c2))
    assert v == pytest.approx(want)


def test_symmetry_and_translation():
    rng = np.random.default_rng(5)
    a, b = rng.random((40, 40)), rng.random((40, 40))
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
    big_a, big_b = np.zeros((50, 50)), np.zeros((50, 50))
    big_a[5:45, 7:47], big_b[5:45, 7:47] = a, b
    assert psnr(big_a[5:45, 7:47], big_b[5:45, 7:47]) == psnr(a, b)


def test_enl_examples():
    assert enl(np.full((4, 4), 0.3)) == math.inf
    assert enl(np.array([[1.0, 1.0], [3.0, 3.0]])) == pytest.approx(3.0)
    rng = np.random.default_rng(6)
    speckle = rng.gamma(4, 1 / 4, size=(100, 100))
    assert 3.7 <= enl(speckle) <= 4.3


def test_enl_roi():
    img = np.ones((10, 10))
    img[0:2, 0:2] = [[1, 1], [3, 3]]
    assert enl(img, (0, 0, 2, 2)) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        enl(img, (8, 8, 4, 4))
    with pytest.raises(ValueError):
        enl(img, (0, 0, 1, 3))


def test_epi_examples():
    rng = np.random.default_rng(7)
    ref = ndimage.gaussian_filter(rng.random((64, 64)), 2)
    assert epi(ref, ref) == 1.0
    assert epi(ndimage.uniform_filter(ref, 3), ref) < 1
    checker = 0.1 * ((np.indices(ref.shape).sum(axis=0) % 2) * 2 - 1)
    assert epi(ref + checker, ref) > 1
    assert math.isnan(epi(ref, np.zeros_like(ref)))


def test_seam_ratio_examples():
    rng = np.random.default_rng(8)
    assert abs(seam_ratio(rng.standard_normal((512, 512)), 64) - 1.0) < 0.05
    blocks = np.zeros((192, 192))
    for i in range(3):
        for j in range(3):
            if (i + j) % 2:
                blocks[i * 64:(i + 1) * 64, j * 64:(j + 1) * 64] += 0.2
    img = blocks + 0.01 * rng.standard_normal(blocks.shape)
    assert seam_ratio(img, 64) > 1.5
    assert math.isnan(seam_ratio(np.ones((128, 128)), 64))
    assert math.isnan(seam_ratio(rng.random((32, 32)), 64))


def test_report_flags_and_text():
    r = MetricsReport(psnr_db=math.inf, ssim_percent=95.0, enl=3.0)
    assert r.psnr_db is None and "psnr_db:inf" in r.flags
    text = r.to_text()
    assert "psnr_db: absent" in text and "ssim_percent: 95" in text
    assert r.csv_row("x")[0] == "x"


def test_evaluate_maps_domain():
    rng = np.random.default_rng(9)
    ref = rng.uniform(-1, 1, (32, 32, 1))
    out = np.clip(ref + 0.2, -1, 1)
    rep = evaluate(out, ref, m=16)
    assert rep.psnr_db == pytest.approx(psnr(to_intensity(out), to_intensity(ref)))
    assert 0 <= rep.ssim_percent <= 100
    assert rep.seam_ratio is not None

import math

import numpy as np
import pytest

from bgl.lowlight.metrics import SSIM_C1, batch_psnr, gaussian_window, psnr, ssim


def test_psnr_examples():
    a = np.random.default_rng(0).random((3, 8, 8)) * 0.8
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-10)
    assert psnr(np.zeros((2, 2)), np.ones((2, 2))) == 0.0
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))


def test_batch_psnr_is_mean_of_images():
    a = np.zeros((2, 1, 4, 4))
    b = a.copy()
    b[0] += 0.1
    b[1] += 0.01
    assert batch_psnr(a, b) == pytest.approx(30.0)


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(1)
    a, b = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12
    assert -1 <= ssim(a, b) <= 1


def test_ssim_constant_images():
    # mu_a = 0, mu_b = 1, zero variances: C1 / (1 + C1)
    v = ssim(np.zeros((12, 12)), np.ones((12, 12)))
    assert v == pytest.approx(SSIM_C1 / (1 + SSIM_C1), rel=1e-9)
    assert v == pytest.approx(9.999e-5, rel=1e-4)


def test_ssim_window_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


def test_gaussian_window():
    w = gaussian_window()
    assert w.shape == (11, 11)
    assert w.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(w, w.T)

import math

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from flowsr.data import generate_hr
from flowsr.metrics import psnr, ssim
from flowsr.model import RejectedInput


def test_psnr_cases():
    x = np.random.default_rng(0).random((16, 16, 1))
    assert psnr(x, x) == math.inf
    assert psnr(np.zeros((8, 8, 1)), np.full((8, 8, 1), 0.1)) == pytest.approx(20.0, abs=1e-12)
    y = np.random.default_rng(1).random((16, 16, 1))
    ref = 10 * np.log10(1.0 / np.mean((x - y) ** 2))
    assert psnr(x, y) == pytest.approx(ref, abs=1e-9)
    with pytest.raises(RejectedInput):
        psnr(x, y[:8])


def test_ssim_matches_independent_implementation():
    rng = np.random.default_rng(2)
    for _ in range(5):
        x, y = rng.random((32, 24)), rng.random((32, 24))
        ref = structural_similarity(x, y, win_size=7, data_range=1.0, use_sample_covariance=True)
        assert ssim(x[..., None], y[..., None]) == pytest.approx(ref, abs=1e-9)


def test_ssim_properties():
    x = generate_hr("textures", 64, np.random.default_rng(3))
    y = generate_hr("shapes", 64, np.random.default_rng(4))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)
    assert ssim(x, np.full_like(x, 0.5)) < 0.5
    rgb = np.random.default_rng(5).random((16, 16, 3))
    per = np.mean([ssim(rgb[..., c:c + 1], rgb[::-1, :, c:c + 1]) for c in range(3)])
    assert ssim(rgb, rgb[::-1]) == pytest.approx(per, abs=1e-12)
    with pytest.raises(RejectedInput):
        ssim(x[:5, :5], x[:5, :5])

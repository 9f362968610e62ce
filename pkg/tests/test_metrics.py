import math

import numpy as np
import pytest
import torch

from rcanit.exceptions import ColorspaceError
from rcanit.exceptions import MetricError
from rcanit.exceptions import ShapeError
from rcanit.metrics import DIHEDRAL_TRANSFORMS
from rcanit.metrics import DihedralTransform
from rcanit.metrics import bicubic_upsampler
from rcanit.metrics import gaussian_window
from rcanit.metrics import nearest_upsampler
from rcanit.metrics import psnr
from rcanit.metrics import rgb_to_y
from rcanit.metrics import self_ensemble
from rcanit.metrics import shave
from rcanit.metrics import ssim
from rcanit.utils.imresize import imresize


@pytest.mark.parametrize(
    "rgb, full_swing, expected",
    [
        ((0.0, 0.0, 0.0), False, 16 / 255),
        ((1.0, 1.0, 1.0), False, 235 / 255),
        ((1.0, 0.0, 0.0), False, (16 + 65.481) / 255),
        ((0.0, 0.0, 0.0), True, 0.0),
        ((1.0, 1.0, 1.0), True, 1.0),
    ],
)
def test_rgb_to_y(rgb, full_swing, expected):
    img = np.ones((2, 3, 3)) * np.array(rgb)
    y = rgb_to_y(img, full_swing)
    assert y.shape == (2, 3, 1)
    assert np.allclose(y, expected, atol=1e-12)


def test_rgb_to_y_accepts_tensors():
    assert rgb_to_y(torch.zeros(2, 2, 3)).shape == (2, 2, 1)


def test_rgb_to_y_needs_three_channels():
    with pytest.raises(ColorspaceError):
        rgb_to_y(np.zeros((4, 4, 1)))


def test_psnr_known_error():
    a = np.zeros((8, 8, 1))
    b = np.full((8, 8, 1), 16 / 255)
    assert psnr(a, b) == pytest.approx(20 * math.log10(255 / 16), abs=1e-9)
    assert psnr(a, b) == pytest.approx(24.048, abs=1e-3)


def test_psnr_symmetric_and_halving():
    rng = np.random.default_rng(0)
    a = rng.random((16, 16, 3))
    b = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)
    assert psnr(a, b) == psnr(b, a)
    halfway = a + (b - a) / 2
    assert psnr(a, halfway) - psnr(a, b) == pytest.approx(20 * math.log10(2), abs=1e-9)


def test_psnr_identical_is_capped():
    img = np.random.default_rng(0).random((8, 8, 3))
    assert psnr(img, img) == 100.0
    assert psnr(img, img, cap=60) == 60


def test_psnr_crop_border_ignores_edges():
    a = np.zeros((10, 10, 1))
    b = a.copy()
    b[:2] = 1.0
    assert psnr(a, b, crop_border=2) == 100.0
    assert psnr(a, b) < 100.0


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


@pytest.mark.parametrize("border", [-1, 5, 8])
def test_shave_invalid(border):
    with pytest.raises(MetricError):
        shave(np.zeros((10, 12)), border)


def test_gaussian_window():
    window = gaussian_window()
    assert window.shape == (11, 11)
    assert window.sum() == pytest.approx(1.0)
    assert np.allclose(window, window.T)
    assert window.argmax() == 5 * 11 + 5


def test_ssim_identical():
    img = np.random.default_rng(0).random((20, 24))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("a, b", [(0.2, 0.6), (0.5, 0.5), (0.0, 1.0)])
def test_ssim_constant_images(a, b):
    c1 = 0.01**2
    expected = (2 * a * b + c1) / (a * a + b * b + c1)
    assert ssim(np.full((16, 16), a), np.full((16, 16, 1), b)) == pytest.approx(expected, abs=1e-9)


def test_ssim_matches_window_loop():
    rng = np.random.default_rng(4)
    a = rng.random((13, 14))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    window = gaussian_window()
    c1, c2 = 0.01**2, 0.03**2
    scores = []
    for i in range(13 - 10):
        for j in range(14 - 10):
            pa = a[i : i + 11, j : j + 11]
            pb = b[i : i + 11, j : j + 11]
            mu_a = (window * pa).sum()
            mu_b = (window * pb).sum()
            var_a = (window * (pa - mu_a) ** 2).sum()
            var_b = (window * (pb - mu_b) ** 2).sum()
            cov = (window * (pa - mu_a) * (pb - mu_b)).sum()
            scores.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
            )
    assert ssim(a, b) == pytest.approx(np.mean(scores), abs=1e-9)


def test_ssim_errors():
    with pytest.raises(MetricError):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))
    with pytest.raises(ShapeError):
        ssim(np.zeros((12, 12, 3)), np.zeros((12, 12, 3)))
    with pytest.raises(ShapeError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))


def test_dihedral_group():
    x = torch.arange(12.0).reshape(1, 1, 3, 4)
    images = [t.apply(x) for t in DIHEDRAL_TRANSFORMS]
    assert len(DIHEDRAL_TRANSFORMS) == 8
    # all eight images are distinct
    assert len({tuple(img.flatten().tolist()) + tuple(img.shape) for img in images}) == 8
    for t in DIHEDRAL_TRANSFORMS:
        assert torch.equal(t.inverse().apply(t.apply(x)), x)
        for u in DIHEDRAL_TRANSFORMS:
            composed = u.apply(t.apply(x))
            assert any(torch.equal(composed, img) for img in images)


def test_dihedral_inverse():
    assert DihedralTransform(1).inverse() == DihedralTransform(3)
    assert DihedralTransform(2, True).inverse() == DihedralTransform(2, True)


def test_self_ensemble_of_equivariant_model_is_identity():
    x = torch.rand(2, 3, 5, 7)
    model = nearest_upsampler(2)
    assert torch.allclose(self_ensemble(model, x), model(x), atol=1e-6)


def test_self_ensemble_matches_loop():
    gen = torch.Generator().manual_seed(0)
    conv = torch.nn.Conv2d(3, 3, 3, padding=1)
    with torch.no_grad():
        conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen))
    x = torch.rand(1, 3, 6, 6, generator=gen)
    expected = torch.zeros_like(x)
    with torch.no_grad():
        for flip in (False, True):
            for k in range(4):
                inp = x.flip(-1) if flip else x
                out = conv(torch.rot90(inp, k, dims=(-2, -1)))
                out = torch.rot90(out, -k, dims=(-2, -1))
                expected += out.flip(-1) if flip else out
    assert torch.allclose(self_ensemble(conv, x), expected / 8, atol=1e-5)
    assert not conv.training


def test_bicubic_upsampler_matches_resizer():
    x = torch.rand(2, 3, 6, 5, dtype=torch.float64)
    out = bicubic_upsampler(3)(x)
    assert out.shape == (2, 3, 18, 15)
    expected = imresize(x[1].numpy().transpose(1, 2, 0), 18, 15).transpose(2, 0, 1)
    assert np.allclose(out[1].numpy(), expected)


def test_nearest_upsampler_values():
    x = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = nearest_upsampler(2)(x)
    assert out.shape == (1, 1, 4, 4)
    assert torch.equal(out[0, 0, :2, :2], torch.ones(2, 2))
    assert torch.equal(out[0, 0, 2:, 2:], torch.full((2, 2), 4.0))

"""Evaluation protocol primitives: Y-channel conversion, PSNR, SSIM and the
x8 dihedral self-ensemble."""

import logging
from dataclasses import dataclass
from typing import Callable
from typing import Tuple

import numpy as np
import torch
from torch import nn

from rcanit.exceptions import ColorspaceError
from rcanit.exceptions import MetricError
from rcanit.exceptions import ShapeError
from rcanit.utils.imresize import imresize

LOGGER = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0

# studio-swing BT.601 luma on [0, 1] inputs, offset and gains in 8-bit units
Y_OFFSET = 16.0
Y_STUDIO = (65.481, 128.553, 24.966)
Y_FULL = (0.299, 0.587, 0.114)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_array(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().double().numpy()
    return np.asarray(img, dtype=np.float64)


def rgb_to_y(img, full_swing: bool = False) -> np.ndarray:
    """H x W x 3 RGB in [0, 1] -> H x W x 1 luma in [0, 1].

    Studio swing maps black to 16/255 and white to 235/255.
    """
    img = _as_array(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ColorspaceError(f"rgb_to_y expects an H x W x 3 RGB image, got shape {img.shape}")
    if full_swing:
        y = img @ np.asarray(Y_FULL)
    else:
        y = (Y_OFFSET + img @ np.asarray(Y_STUDIO)) / 255.0
    return y[:, :, None]


def shave(img: np.ndarray, border: int) -> np.ndarray:
    if border < 0 or 2 * border >= img.shape[0] or 2 * border >= img.shape[1]:
        raise MetricError(f"crop_border {border} invalid for image of size {img.shape[:2]}")
    if not border:
        return img
    return img[border:-border, border:-border]


def psnr(a, b, crop_border: int = 0, cap: float = PSNR_CAP_DB) -> float:
    """PSNR in dB on the [0, 1] domain; zero error returns `cap`."""
    a = _as_array(a)
    b = _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    a = shave(a, crop_border)
    b = shave(b, crop_border)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return float(min(10.0 * np.log10(1.0 / mse), cap))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _single_channel(img) -> np.ndarray:
    img = _as_array(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim != 2:
        raise ShapeError(f"ssim expects a single-channel image, got shape {img.shape}")
    return img


def ssim(a, b, data_range: float = 1.0) -> float:
    """Gaussian-windowed SSIM averaged over all valid window positions."""
    a = _single_channel(a)
    b = _single_channel(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise MetricError(f"image {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")

    window = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def local(x):
        view = np.lib.stride_tricks.sliding_window_view(x, window.shape)
        return np.einsum("ijkl,kl->ij", view, window)

    mu_a = local(a)
    mu_b = local(b)
    var_a = local(a * a) - mu_a**2
    var_b = local(b * b) - mu_b**2
    cov = local(a * b) - mu_a * mu_b
    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


@dataclass(frozen=True)
class DihedralTransform:
    """Optional horizontal flip followed by `k` quarter turns over the last two dims."""

    k: int = 0
    flip: bool = False

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        if self.flip:
            x = x.flip(-1)
        return torch.rot90(x, self.k, dims=(-2, -1)) if self.k else x

    def inverse(self) -> "DihedralTransform":
        # a flip composed with a rotation is its own inverse
        if self.flip:
            return self
        return DihedralTransform((-self.k) % 4, False)


DIHEDRAL_TRANSFORMS: Tuple[DihedralTransform, ...] = tuple(
    DihedralTransform(k, flip) for flip in (False, True) for k in range(4)
)


@torch.no_grad()
def self_ensemble(model: Callable[[torch.Tensor], torch.Tensor], lr: torch.Tensor) -> torch.Tensor:
    """Average of the model outputs over the 8 dihedral transforms, each inverted."""
    if isinstance(model, nn.Module):
        model.eval()
    outputs = [t.inverse().apply(model(t.apply(lr))) for t in DIHEDRAL_TRANSFORMS]
    return torch.stack(outputs).mean(dim=0)


class NearestUpsampler(nn.Module):
    """Pixel replication x`scale`; equivariant to every dihedral transform."""

    def __init__(self, scale: int):
        super().__init__()
        self.scale = scale

    def forward(self, x):
        return x.repeat_interleave(self.scale, dim=-2).repeat_interleave(self.scale, dim=-1)


class BicubicUpsampler(nn.Module):
    """Bicubic interpolation baseline with the dataset resizer."""

    def __init__(self, scale: int):
        super().__init__()
        self.scale = scale

    def forward(self, x):
        out = []
        for img in x.detach().cpu().double().numpy():
            _, h, w = img.shape
            up = imresize(img.transpose(1, 2, 0), h * self.scale, w * self.scale)
            out.append(up.transpose(2, 0, 1))
        return torch.from_numpy(np.stack(out)).to(dtype=x.dtype, device=x.device)


def nearest_upsampler(scale: int) -> NearestUpsampler:
    return NearestUpsampler(scale)


def bicubic_upsampler(scale: int) -> BicubicUpsampler:
    return BicubicUpsampler(scale)

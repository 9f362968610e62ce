"""Image I/O and array/tensor conversions.

Images travel through the data and metric pipelines as float64 numpy arrays
of shape H x W x C with values in [0, 1]; models consume float32 torch
tensors of shape N x C x H x W.
"""

import logging
from pathlib import Path

import numpy as np
import torch
from PIL import Image

LOGGER = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")


def read_image(path) -> np.ndarray:
    """Read an 8-bit image as an RGB float array in [0, 1]."""
    with Image.open(path) as img:
        data = np.asarray(img.convert("RGB"), dtype=np.float64)
    return data / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid, the same values a PNG round trip yields."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def write_image(path, img: np.ndarray) -> None:
    """Write a [0, 1] RGB (or single channel) float array as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    Image.fromarray(data).save(path)


def modcrop(img: np.ndarray, scale: int) -> np.ndarray:
    """Crop H and W down to multiples of `scale`."""
    h, w = img.shape[:2]
    return img[: h - h % scale, : w - w % scale]


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """H x W x C array -> 1 x C x H x W float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float().unsqueeze(0)


def to_array(tensor: torch.Tensor) -> np.ndarray:
    """1 x C x H x W (or C x H x W) tensor -> H x W x C float64 array."""
    if tensor.dim() == 4:
        if tensor.shape[0] != 1:
            raise ValueError(f"expected a single image batch, got {tuple(tensor.shape)}")
        tensor = tensor[0]
    return tensor.detach().cpu().double().numpy().transpose(1, 2, 0)


def list_images(directory: Path):
    """Image files of `directory` sorted by name."""
    return sorted(
        p for p in Path(directory).iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )

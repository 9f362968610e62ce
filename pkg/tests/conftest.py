import numpy as np
import pytest
import torch

from rcanit.data import SamplerConfig
from rcanit.data import prepare_dataset
from rcanit.model import ModelConfig
from rcanit.optim import OptimizerHyper
from rcanit.trainer import TrainConfig
from rcanit.utils.image import write_image


def texture(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Smooth sinusoidal pattern per channel plus mild noise, in [0, 1]."""
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    img = np.empty((height, width, 3))
    for c in range(3):
        fx, fy = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img[..., c] = 0.5 + 0.35 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    img += 0.03 * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


@pytest.fixture
def make_dataset(tmp_path):
    """Factory writing ``<tmp>/<name>/HR/img_XXX.png`` and optional LR trees."""

    def factory(name="data", count=4, size=(48, 48), scales=(), seed=0):
        root = tmp_path / name
        rng = np.random.default_rng(seed)
        for i in range(count):
            write_image(root / "HR" / f"img_{i:03d}.png", texture(rng, *size))
        if scales:
            prepare_dataset(root, scales)
        return root

    return factory


@pytest.fixture
def tiny_config():
    return ModelConfig(scale=2, n_groups=2, n_blocks_per_group=2, n_feats=16, reduction=4)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(
        batch_size=2,
        total_iters=4,
        optimizer=OptimizerHyper(kind="adam", lr=1e-3),
        sampler=SamplerConfig(patch_size=8, seed=0),
        log_every=1,
        val_count=0,
        seed=0,
    )


@pytest.fixture(autouse=True)
def _single_thread():
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(threads)

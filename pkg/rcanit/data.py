"""Dataset ingestion, bicubic degradation, LR/HR patch sampling, augmentation,
mixup and rejection sampling.

Dataset layout::

    <root>/HR/*.png
    <root>/LR_bicubic/X{2,3,4}/*.png   (optional, same stems as HR)
    <root>/meta.json                   (written by prepare_dataset)
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from dataclasses import replace
from pathlib import Path
from typing import Iterable
from typing import Iterator
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader
from torch.utils.data import IterableDataset
from torch.utils.data import get_worker_info

from rcanit.exceptions import ColorspaceError
from rcanit.exceptions import ConfigurationError
from rcanit.exceptions import DatasetIndexError
from rcanit.exceptions import DatasetNotFound
from rcanit.exceptions import SamplingError
from rcanit.exceptions import ShapeError
from rcanit.metrics import psnr
from rcanit.model import SUPPORTED_SCALES
from rcanit.utils.helpers import dump_json
from rcanit.utils.helpers import load_file
from rcanit.utils.image import list_images
from rcanit.utils.image import modcrop
from rcanit.utils.image import quantize
from rcanit.utils.image import read_image
from rcanit.utils.image import write_image
from rcanit.utils.imresize import imresize

LOGGER = logging.getLogger(__name__)

# H x W x C float array in [0, 1]
ImageTensor = np.ndarray

META_FILE = "meta.json"
REJECTION_ATTEMPTS = 100


@dataclass(frozen=True)
class RejectionConfig:
    threshold_db: float = 24.0
    reject_prob: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.reject_prob <= 1.0:
            raise ConfigurationError("reject_prob", f"must lie in [0, 1], got {self.reject_prob}")


@dataclass(frozen=True)
class SamplerConfig:
    patch_size: int = 48
    geo_aug: bool = True
    color_aug: bool = False
    mixup_alpha: Optional[float] = None
    rejection: Optional[RejectionConfig] = None
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 8:
            raise ConfigurationError("patch_size", f"must be >= 8, got {self.patch_size}")
        if self.mixup_alpha is not None and self.mixup_alpha <= 0:
            raise ConfigurationError("mixup_alpha", f"must be positive, got {self.mixup_alpha}")


@dataclass(frozen=True)
class IndexEntry:
    hr_path: Path
    lr_path: Optional[Path] = None

    @property
    def name(self) -> str:
        return self.hr_path.stem


@dataclass
class PatchPair:
    lr: ImageTensor
    hr: ImageTensor
    source_id: str
    offset: Tuple[int, int]


@dataclass
class Batch:
    """lr: B x C x p x p, hr: B x C x sp x sp float32 tensors."""

    lr: torch.Tensor
    hr: torch.Tensor
    source_ids: List[str]


def _check_scale(scale: int) -> None:
    if scale not in SUPPORTED_SCALES:
        raise ConfigurationError("scale", f"{scale} not in {SUPPORTED_SCALES}")


def scan_dataset(root_path, scale: int) -> List[IndexEntry]:
    """Index (HR, LR-or-None) pairs sorted by file name.

    Args:
        root_path: dataset root with an ``HR/`` directory.
        scale: selects ``LR_bicubic/X{scale}``; without it LR is synthesized on load.
    """
    _check_scale(scale)
    root = Path(root_path)
    hr_dir = root / "HR"
    if not hr_dir.is_dir():
        raise DatasetNotFound(f"HR directory not found: {hr_dir}")

    hr_files = list_images(hr_dir)
    lr_dir = root / "LR_bicubic" / f"X{scale}"
    if not lr_dir.is_dir():
        LOGGER.info(f"{lr_dir} not found, LR images will be synthesized with bicubic_resize")
        return [IndexEntry(path) for path in hr_files]

    lr_files = {path.stem: path for path in list_images(lr_dir)}
    entries = []
    for hr_path in hr_files:
        lr_path = lr_files.pop(hr_path.stem, None)
        if lr_path is None:
            raise DatasetIndexError(f"missing LR image for '{hr_path.name}' in {lr_dir}")
        entries.append(IndexEntry(hr_path, lr_path))
    if lr_files:
        orphan = lr_files[sorted(lr_files)[0]]
        raise DatasetIndexError(f"LR image '{orphan.name}' has no HR counterpart in {hr_dir}")
    return entries


def split_index(index: Sequence[IndexEntry], val_count: int):
    """Hold out the last `val_count` entries (sorted by name) for validation."""
    if val_count < 0 or (val_count and val_count >= len(index)):
        raise ConfigurationError(
            "val_count", f"{val_count} leaves no training images out of {len(index)}"
        )
    if not val_count:
        return list(index), []
    return list(index[:-val_count]), list(index[-val_count:])


def bicubic_resize(img: ImageTensor, out_h: int, out_w: int) -> ImageTensor:
    """Cubic convolution resize (a = -0.5) with antialiasing when downscaling."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output dims must be >= 1, got {out_h}x{out_w}")
    return imresize(img, out_h, out_w)


def load_pair(entry: IndexEntry, scale: int) -> Tuple[ImageTensor, ImageTensor]:
    """Decode (hr, lr) with hr cropped to exactly `scale` x lr dims."""
    hr = modcrop(read_image(entry.hr_path), scale)
    if entry.lr_path is None:
        lr = quantize(bicubic_resize(hr, hr.shape[0] // scale, hr.shape[1] // scale))
        return hr, lr
    lr = read_image(entry.lr_path)
    lh, lw = lr.shape[:2]
    if hr.shape[0] < scale * lh or hr.shape[1] < scale * lw:
        raise ShapeError(
            f"HR '{entry.hr_path.name}' {hr.shape[:2]} is smaller than x{scale} LR {lr.shape[:2]}"
        )
    return hr[: scale * lh, : scale * lw], lr


class PairLoader:
    """Decodes index entries, keeping the most recent `cache_size` pairs in memory."""

    def __init__(self, scale: int, cache_size: int = 32):
        self.scale = scale
        self.cache_size = cache_size
        self._cache: "OrderedDict[Path, Tuple[ImageTensor, ImageTensor]]" = OrderedDict()

    def __call__(self, entry: IndexEntry) -> Tuple[ImageTensor, ImageTensor]:
        key = entry.hr_path
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        pair = load_pair(entry, self.scale)
        self._cache[key] = pair
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return pair

    def __repr__(self):
        return f"<PairLoader(scale={self.scale}, cached={len(self._cache)})>"


def sample_patch_pair(
    hr: ImageTensor,
    lr: ImageTensor,
    scale: int,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    source_id: str = "",
) -> PatchPair:
    """Uniformly random aligned crop; offsets live on the LR grid."""
    size = cfg.patch_size
    lh, lw = lr.shape[:2]
    if lh < size or lw < size:
        raise SamplingError(f"LR image '{source_id}' {lh}x{lw} is smaller than patch {size}")
    if hr.shape[0] < scale * lh or hr.shape[1] < scale * lw:
        raise ShapeError(f"HR {hr.shape[:2]} does not cover x{scale} LR {lr.shape[:2]}")
    row = int(rng.integers(0, lh - size + 1))
    col = int(rng.integers(0, lw - size + 1))
    lr_patch = lr[row : row + size, col : col + size]
    hr_patch = hr[scale * row : scale * (row + size), scale * col : scale * (col + size)]
    return PatchPair(lr_patch.copy(), hr_patch.copy(), source_id, (row, col))


@dataclass(frozen=True)
class GeometricTransform:
    hflip: bool = False
    vflip: bool = False
    transpose: bool = False

    @classmethod
    def sample(cls, rng) -> "GeometricTransform":
        return cls(rng.random() < 0.5, rng.random() < 0.5, rng.random() < 0.5)

    def apply_image(self, img: ImageTensor) -> ImageTensor:
        if self.hflip:
            img = img[:, ::-1]
        if self.vflip:
            img = img[::-1]
        if self.transpose:
            img = img.transpose(1, 0, 2)
        return np.ascontiguousarray(img)

    def apply(self, pair: PatchPair) -> PatchPair:
        return replace(pair, lr=self.apply_image(pair.lr), hr=self.apply_image(pair.hr))


def augment_geometric(pair: PatchPair, rng) -> PatchPair:
    """Independent 50% h-flip, v-flip and transpose, shared by LR and HR."""
    if pair.lr.shape[0] != pair.lr.shape[1]:
        raise ShapeError(f"geometric augmentation needs square patches, got {pair.lr.shape[:2]}")
    return GeometricTransform.sample(rng).apply(pair)


@dataclass(frozen=True)
class ColorTransform:
    invert: bool = False
    permutation: Tuple[int, ...] = (0, 1, 2)

    @classmethod
    def sample(cls, rng) -> "ColorTransform":
        invert = rng.random() < 0.5
        if rng.random() < 0.5:
            return cls(invert, tuple(int(i) for i in rng.permutation(3)))
        return cls(invert)

    def apply_image(self, img: ImageTensor) -> ImageTensor:
        if self.invert:
            img = 1.0 - img
        return np.ascontiguousarray(img[..., list(self.permutation)])

    def apply(self, pair: PatchPair) -> PatchPair:
        return replace(pair, lr=self.apply_image(pair.lr), hr=self.apply_image(pair.hr))


def augment_color(pair: PatchPair, rng) -> PatchPair:
    """50% invert (x -> 1 - x) and, independently, 50% channel shuffle."""
    if pair.lr.shape[-1] != 3 or pair.hr.shape[-1] != 3:
        raise ColorspaceError("color augmentation needs RGB patches")
    return ColorTransform.sample(rng).apply(pair)


def sample_mixup_lambda(alpha: float, rng: np.random.Generator) -> float:
    return float(rng.beta(alpha, alpha))


def mixup_batch(
    batch: Sequence[PatchPair],
    alpha: float,
    rng: np.random.Generator,
    lam: Optional[float] = None,
    permutation: Optional[Sequence[int]] = None,
) -> List[PatchPair]:
    """Mix every pair with a permutation partner using one lambda ~ Beta(alpha, alpha)."""
    if len(batch) < 2:
        raise SamplingError(f"mixup needs at least 2 samples, got {len(batch)}")
    if lam is None:
        lam = sample_mixup_lambda(alpha, rng)
    if permutation is None:
        permutation = rng.permutation(len(batch))
    mixed = []
    for pair, k in zip(batch, permutation):
        partner = batch[int(k)]
        mixed.append(
            replace(
                pair,
                lr=np.clip(lam * pair.lr + (1.0 - lam) * partner.lr, 0.0, 1.0),
                hr=np.clip(lam * pair.hr + (1.0 - lam) * partner.hr, 0.0, 1.0),
            )
        )
    return mixed


def rejection_decision(score_db: float, threshold_db: float, reject_prob: float, rng) -> bool:
    """Accept below the threshold; otherwise accept with probability 1 - reject_prob."""
    if score_db < threshold_db:
        return True
    return rng.random() >= reject_prob


def rejection_filter(pair: PatchPair, threshold_db: float, reject_prob: float, rng) -> bool:
    """Accept/reject a pair by how well plain bicubic upsampling already reconstructs it.

    PSNR is measured on RGB without border crop.
    """
    hr_h, hr_w = pair.hr.shape[:2]
    upsampled = np.clip(bicubic_resize(pair.lr, hr_h, hr_w), 0.0, 1.0)
    return rejection_decision(psnr(upsampled, pair.hr), threshold_db, reject_prob, rng)


def collate(pairs: Sequence[PatchPair]) -> Batch:
    lr = np.stack([pair.lr for pair in pairs]).transpose(0, 3, 1, 2)
    hr = np.stack([pair.hr for pair in pairs]).transpose(0, 3, 1, 2)
    return Batch(
        lr=torch.from_numpy(np.ascontiguousarray(lr)).float(),
        hr=torch.from_numpy(np.ascontiguousarray(hr)).float(),
        source_ids=[pair.source_id for pair in pairs],
    )


class PatchStream(IterableDataset):
    """Infinite stream of augmented batches; each worker seeds from (seed, worker_id)."""

    def __init__(self, index: Sequence[IndexEntry], scale: int, cfg: SamplerConfig, batch_size: int):
        super().__init__()
        self.index = list(index)
        self.scale = scale
        self.cfg = cfg
        self.batch_size = batch_size
        self.loader = PairLoader(scale)

    def sample(self, rng: np.random.Generator) -> PatchPair:
        cfg = self.cfg
        for _ in range(REJECTION_ATTEMPTS):
            entry = self.index[int(rng.integers(len(self.index)))]
            hr, lr = self.loader(entry)
            pair = sample_patch_pair(hr, lr, self.scale, cfg, rng, entry.name)
            if cfg.rejection is None or rejection_filter(
                pair, cfg.rejection.threshold_db, cfg.rejection.reject_prob, rng
            ):
                break
        else:
            LOGGER.warning(
                f"rejection kept no patch in {REJECTION_ATTEMPTS} attempts, using {pair.source_id}"
            )
        if cfg.geo_aug:
            pair = augment_geometric(pair, rng)
        if cfg.color_aug:
            pair = augment_color(pair, rng)
        return pair

    def next_batch(self, rng: np.random.Generator) -> Batch:
        pairs = [self.sample(rng) for _ in range(self.batch_size)]
        if self.cfg.mixup_alpha is not None:
            pairs = mixup_batch(pairs, self.cfg.mixup_alpha, rng)
        return collate(pairs)

    def batches(self, rng: np.random.Generator) -> Iterator[Batch]:
        while True:
            yield self.next_batch(rng)

    def __iter__(self):
        info = get_worker_info()
        worker_id = info.id if info is not None else 0
        return self.batches(np.random.default_rng([self.cfg.seed, worker_id]))

    def __repr__(self):
        return f"<PatchStream(images={len(self.index)}, scale={self.scale}, batch={self.batch_size})>"


def make_batch_stream(
    index: Sequence[IndexEntry],
    scale: int,
    cfg: SamplerConfig,
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
    workers: int = 1,
) -> Iterator[Batch]:
    """Infinite batch iterator.

    With a single worker the stream is driven by `rng` (or one seeded from
    ``(cfg.seed, 0)``) and is fully deterministic. Several workers each derive
    their generator from ``(cfg.seed, worker_id)``; the loader hands batches
    out round-robin, so the order is reproducible as well.
    """
    if not index:
        raise SamplingError("dataset index is empty")
    if batch_size < 1:
        raise ConfigurationError("batch_size", f"must be >= 1, got {batch_size}")
    stream = PatchStream(index, scale, cfg, batch_size)
    if workers <= 1:
        if rng is None:
            rng = np.random.default_rng([cfg.seed, 0])
        return stream.batches(rng)
    LOGGER.info(f"streaming batches with {workers} workers")
    return iter(DataLoader(stream, batch_size=None, num_workers=workers))


def dataset_mean(paths: Iterable[Path]) -> Tuple[float, float, float]:
    """Per-channel RGB mean over all pixels of the given images."""
    sums = np.zeros(3)
    pixels = 0
    for path in paths:
        img = read_image(path)
        sums += img.reshape(-1, 3).sum(axis=0)
        pixels += img.shape[0] * img.shape[1]
    if not pixels:
        raise DatasetNotFound("no images to average")
    return tuple(float(v) for v in sums / pixels)


def prepare_dataset(root_path, scales: Sequence[int]) -> dict:
    """Write ``LR_bicubic/X{s}`` trees and ``meta.json``; existing LR files are kept."""
    root = Path(root_path)
    hr_dir = root / "HR"
    if not hr_dir.is_dir():
        raise DatasetNotFound(f"HR directory not found: {hr_dir}")
    for scale in scales:
        _check_scale(scale)
    hr_files = list_images(hr_dir)
    if not hr_files:
        raise DatasetNotFound(f"no HR images in {hr_dir}")

    written = 0
    for path in hr_files:
        hr = None
        for scale in scales:
            out_path = root / "LR_bicubic" / f"X{scale}" / f"{path.stem}.png"
            if out_path.exists():
                continue
            if hr is None:
                hr = read_image(path)
            cropped = modcrop(hr, scale)
            lr = bicubic_resize(cropped, cropped.shape[0] // scale, cropped.shape[1] // scale)
            write_image(out_path, lr)
            written += 1
    LOGGER.info(f"wrote {written} LR images for scales {list(scales)} under {root}")

    meta_path = root / META_FILE
    known = set()
    if meta_path.exists():
        known = set(load_file(meta_path).get("scale_list", []))
    meta = {
        "mean_rgb": [round(v, 8) for v in dataset_mean(hr_files)],
        "scale_list": sorted(known | set(scales)),
        "count": len(hr_files),
    }
    dump_json(meta, meta_path)
    return meta

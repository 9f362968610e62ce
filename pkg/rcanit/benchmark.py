"""Benchmark evaluation and single-image inference.

A benchmark directory follows the dataset layout (``HR/`` plus optional
``LR_bicubic/X{s}/``). Every image is super-resolved, clamped, quantized to
8 bits, converted to Y, border-cropped and scored with PSNR and SSIM.
"""

import json
import logging
import math
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from functools import partial
from pathlib import Path
from typing import Callable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
import torch
from torch import nn

from rcanit.data import IndexEntry
from rcanit.data import load_pair
from rcanit.data import scan_dataset
from rcanit.exceptions import ConfigurationError
from rcanit.exceptions import ReportError
from rcanit.metrics import psnr
from rcanit.metrics import rgb_to_y
from rcanit.metrics import self_ensemble
from rcanit.metrics import shave
from rcanit.metrics import ssim
from rcanit.utils.helpers import dump_json
from rcanit.utils.image import quantize
from rcanit.utils.image import read_image
from rcanit.utils.image import to_array
from rcanit.utils.image import to_tensor
from rcanit.utils.image import write_image

LOGGER = logging.getLogger(__name__)

DEFAULT_OVERLAP = 8

SRModel = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class ImageScore:
    name: str
    psnr: float
    ssim: float


@dataclass(frozen=True)
class Protocol:
    scale: int
    crop_border: int
    ensemble: bool = False
    colorspace: str = "y"
    y_swing: str = "studio"
    quantize: bool = True


@dataclass
class MetricReport:
    """Per-image scores plus the protocol they were measured under."""

    protocol: Protocol
    per_image: List[ImageScore] = field(default_factory=list)

    @property
    def aggregate(self) -> Tuple[float, float]:
        """Arithmetic means of (psnr, ssim)."""
        if not self.per_image:
            raise ReportError("report has no images")
        count = len(self.per_image)
        return (
            math.fsum(score.psnr for score in self.per_image) / count,
            math.fsum(score.ssim for score in self.per_image) / count,
        )

    def to_dict(self) -> dict:
        mean_psnr, mean_ssim = self.aggregate
        return {
            "per_image": [asdict(score) for score in self.per_image],
            "aggregate": {"psnr": mean_psnr, "ssim": mean_ssim},
            "protocol": asdict(self.protocol),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        return cls(
            protocol=Protocol(**data["protocol"]),
            per_image=[ImageScore(**score) for score in data["per_image"]],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_json(self, path) -> None:
        dump_json(self.to_dict(), path)

    def to_table(self) -> str:
        width = max([len("image"), len("mean")] + [len(s.name) for s in self.per_image])
        rows = [f"{'image':<{width}}  {'PSNR':>9}  {'SSIM':>7}"]
        rows.append("-" * len(rows[0]))
        for score in self.per_image:
            rows.append(f"{score.name:<{width}}  {score.psnr:>9.4f}  {score.ssim:>7.4f}")
        rows.append("-" * len(rows[0]))
        mean_psnr, mean_ssim = self.aggregate
        rows.append(f"{'mean':<{width}}  {mean_psnr:>9.4f}  {mean_ssim:>7.4f}")
        proto = self.protocol
        rows.append(
            f"x{proto.scale} {proto.colorspace}({proto.y_swing}) crop={proto.crop_border}"
            f" ensemble={proto.ensemble} quantize={proto.quantize}"
        )
        return "\n".join(rows)

    def __repr__(self):
        return f"<MetricReport(images={len(self.per_image)}, scale={self.protocol.scale})>"


def _model_device(model) -> torch.device:
    if isinstance(model, nn.Module):
        param = next(model.parameters(), None)
        if param is not None:
            return param.device
    return torch.device("cpu")


@torch.no_grad()
def tiled_forward(model: SRModel, lr: torch.Tensor, tile: int, overlap: int = DEFAULT_OVERLAP):
    """Run `model` on overlapping LR tiles and keep each tile's centre.

    Tiles are `tile` LR pixels wide and read `overlap` extra pixels on every
    side, so the stitched output only uses pixels at least `overlap * scale`
    HR pixels away from a tile edge.
    """
    if tile < 1:
        raise ConfigurationError("tile", f"must be >= 1, got {tile}")
    if overlap < 0:
        raise ConfigurationError("overlap", f"must be >= 0, got {overlap}")
    _, _, height, width = lr.shape
    out = None
    scale = None
    for top in range(0, height, tile):
        bottom = min(top + tile, height)
        for left in range(0, width, tile):
            right = min(left + tile, width)
            y0, y1 = max(top - overlap, 0), min(bottom + overlap, height)
            x0, x1 = max(left - overlap, 0), min(right + overlap, width)
            sr = model(lr[..., y0:y1, x0:x1])
            if out is None:
                scale = sr.shape[-1] // (x1 - x0)
                out = sr.new_zeros(sr.shape[0], sr.shape[1], height * scale, width * scale)
            out[..., top * scale : bottom * scale, left * scale : right * scale] = sr[
                ...,
                (top - y0) * scale : (bottom - y0) * scale,
                (left - x0) * scale : (right - x0) * scale,
            ]
    return out


@torch.no_grad()
def super_resolve(
    model: SRModel,
    lr: torch.Tensor,
    ensemble: bool = False,
    tile: Optional[int] = None,
    overlap: int = DEFAULT_OVERLAP,
) -> torch.Tensor:
    """N x C x H x W LR batch -> SR batch, optionally self-ensembled and tiled."""
    if isinstance(model, nn.Module):
        model.eval()
    lr = lr.to(_model_device(model))
    run = model if tile is None else partial(tiled_forward, model, tile=tile, overlap=overlap)
    return self_ensemble(run, lr) if ensemble else run(lr)


def score_image(
    sr: np.ndarray, hr: np.ndarray, crop_border: int, full_swing: bool = False
) -> Tuple[float, float]:
    """(psnr, ssim) of two RGB images on the border-cropped Y channel."""
    sr_y = rgb_to_y(sr, full_swing)
    hr_y = rgb_to_y(hr, full_swing)
    return (
        psnr(sr_y, hr_y, crop_border),
        ssim(shave(sr_y, crop_border), shave(hr_y, crop_border)),
    )


def evaluate_entries(
    model: SRModel,
    entries: Sequence[IndexEntry],
    protocol: Protocol,
    tile: Optional[int] = None,
) -> MetricReport:
    if not entries:
        raise ReportError("benchmark contains no images")
    report = MetricReport(protocol)
    full_swing = protocol.y_swing == "full"
    for entry in entries:
        hr, lr = load_pair(entry, protocol.scale)
        sr = super_resolve(model, to_tensor(lr), protocol.ensemble, tile)
        sr = to_array(sr.clamp(0.0, 1.0))
        if protocol.quantize:
            sr = quantize(sr)
        psnr_db, ssim_value = score_image(sr, hr, protocol.crop_border, full_swing)
        report.per_image.append(ImageScore(entry.name, psnr_db, ssim_value))
        LOGGER.debug(f"{entry.name}: {psnr_db:.4f} dB / {ssim_value:.4f}")
    return report


def evaluate_benchmark(
    model: SRModel,
    benchmark_root,
    scale: int,
    ensemble: bool = False,
    crop_border: Optional[int] = None,
    full_swing: bool = False,
    quantize_output: bool = True,
    tile: Optional[int] = None,
) -> MetricReport:
    """Score `model` on every image of `benchmark_root`.

    Args:
        crop_border: pixels shaved from each side before scoring, `scale` by default.
        full_swing: use full-range BT.601 luma instead of studio swing.
        quantize_output: round SR output to 8 bits as a PNG round trip would.
    """
    protocol = Protocol(
        scale=scale,
        crop_border=scale if crop_border is None else crop_border,
        ensemble=ensemble,
        y_swing="full" if full_swing else "studio",
        quantize=quantize_output,
    )
    entries = scan_dataset(benchmark_root, scale)
    report = evaluate_entries(model, entries, protocol, tile)
    mean_psnr, mean_ssim = report.aggregate
    LOGGER.info(
        f"{Path(benchmark_root).name} x{scale}: {mean_psnr:.4f} dB / {mean_ssim:.4f}"
        f" over {len(entries)} images (ensemble={ensemble})"
    )
    return report


def infer_image(
    model: SRModel,
    lr_path,
    out_path,
    ensemble: bool = False,
    tile: Optional[int] = None,
    overlap: int = DEFAULT_OVERLAP,
) -> np.ndarray:
    """Super-resolve one image file and write the result as an 8-bit PNG."""
    lr = read_image(lr_path)
    sr = super_resolve(model, to_tensor(lr), ensemble, tile, overlap)
    sr = quantize(to_array(sr.clamp(0.0, 1.0)))
    write_image(out_path, sr)
    LOGGER.info(f"wrote {out_path} ({sr.shape[1]}x{sr.shape[0]})")
    return sr

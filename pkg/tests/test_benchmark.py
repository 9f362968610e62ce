import numpy as np
import pytest
import torch

from rcanit.benchmark import ImageScore
from rcanit.benchmark import MetricReport
from rcanit.benchmark import Protocol
from rcanit.benchmark import evaluate_benchmark
from rcanit.benchmark import infer_image
from rcanit.benchmark import score_image
from rcanit.benchmark import super_resolve
from rcanit.benchmark import tiled_forward
from rcanit.data import load_pair
from rcanit.data import scan_dataset
from rcanit.exceptions import ConfigurationError
from rcanit.exceptions import ReportError
from rcanit.metrics import bicubic_upsampler
from rcanit.metrics import nearest_upsampler
from rcanit.metrics import psnr
from rcanit.metrics import rgb_to_y
from rcanit.metrics import shave
from rcanit.metrics import ssim
from rcanit.model import build_model
from rcanit.model import forward
from rcanit.utils.helpers import load_file
from rcanit.utils.image import quantize
from rcanit.utils.image import read_image
from rcanit.utils.image import to_array
from rcanit.utils.image import to_tensor
from rcanit.utils.image import write_image


@pytest.fixture
def replicated_benchmark(tmp_path):
    """Benchmark whose HR images are exact x2 pixel replications of the LR ones."""
    root = tmp_path / "Set2"
    rng = np.random.default_rng(0)
    for i in range(2):
        lr = np.round(rng.random((12, 14, 3)) * 255) / 255
        write_image(root / "LR_bicubic" / "X2" / f"im{i}.png", lr)
        write_image(root / "HR" / f"im{i}.png", np.kron(lr, np.ones((2, 2, 1))))
    return root


def test_exact_copy_scores_cap(replicated_benchmark):
    report = evaluate_benchmark(nearest_upsampler(2), replicated_benchmark, 2)
    assert [score.name for score in report.per_image] == ["im0", "im1"]
    assert report.aggregate == (100.0, pytest.approx(1.0, abs=1e-12))
    assert report.protocol == Protocol(scale=2, crop_border=2)


def test_ensemble_of_equivariant_model_changes_nothing(make_dataset):
    root = make_dataset(name="bench", count=2, size=(24, 28))
    plain = evaluate_benchmark(nearest_upsampler(2), root, 2)
    ensembled = evaluate_benchmark(nearest_upsampler(2), root, 2, ensemble=True)
    assert ensembled.protocol.ensemble
    for a, b in zip(plain.per_image, ensembled.per_image):
        assert a.psnr == pytest.approx(b.psnr, abs=1e-9)
        assert a.ssim == pytest.approx(b.ssim, abs=1e-9)


def test_report_composes_metric_primitives(make_dataset):
    root = make_dataset(name="bench", count=2, size=(36, 30))
    report = evaluate_benchmark(bicubic_upsampler(3), root, 3)
    for entry, score in zip(scan_dataset(root, 3), report.per_image):
        hr, lr = load_pair(entry, 3)
        sr = quantize(to_array(bicubic_upsampler(3)(to_tensor(lr)).clamp(0, 1)))
        sr_y, hr_y = rgb_to_y(sr), rgb_to_y(hr)
        assert score.psnr == pytest.approx(psnr(sr_y, hr_y, 3), abs=1e-9)
        assert score.ssim == pytest.approx(ssim(shave(sr_y, 3), shave(hr_y, 3)), abs=1e-9)
        assert 15 < score.psnr < 100


def test_protocol_options(make_dataset):
    root = make_dataset(name="bench", count=1, size=(32, 32))
    report = evaluate_benchmark(
        bicubic_upsampler(2), root, 2, crop_border=0, full_swing=True, quantize_output=False
    )
    assert report.protocol == Protocol(scale=2, crop_border=0, y_swing="full", quantize=False)


def test_empty_benchmark(tmp_path):
    (tmp_path / "HR").mkdir()
    with pytest.raises(ReportError):
        evaluate_benchmark(nearest_upsampler(2), tmp_path, 2)
    with pytest.raises(ReportError):
        MetricReport(Protocol(2, 2)).aggregate


def test_report_serialization(tmp_path):
    report = MetricReport(
        Protocol(scale=4, crop_border=4, ensemble=True),
        [ImageScore("a", 30.0, 0.9), ImageScore("b", 32.0, 0.8)],
    )
    data = report.to_dict()
    assert sorted(data) == ["aggregate", "per_image", "protocol"]
    assert data["aggregate"] == {"psnr": 31.0, "ssim": pytest.approx(0.85)}
    assert data["protocol"]["ensemble"] is True
    assert MetricReport.from_dict(data) == report

    report.write_json(tmp_path / "report.json")
    assert load_file(tmp_path / "report.json")["per_image"][1] == {"name": "b", "psnr": 32.0, "ssim": 0.8}

    table = report.to_table()
    assert "mean" in table and "31.0000" in table
    assert "x4" in table


def test_score_image_identical():
    img = np.random.default_rng(0).random((20, 20, 3))
    assert score_image(img, img, 2) == (100.0, pytest.approx(1.0))


@pytest.mark.parametrize("tile, overlap", [(5, 2), (4, 0), (7, 8), (100, 8)])
def test_tiled_nearest_matches_untiled(tile, overlap):
    lr = torch.rand(1, 3, 17, 23)
    model = nearest_upsampler(3)
    assert torch.equal(tiled_forward(model, lr, tile, overlap), model(lr))


def test_single_tile_matches_plain_forward(tiny_config):
    model = build_model(tiny_config, 0).eval()
    lr = torch.rand(1, 3, 10, 12)
    with torch.no_grad():
        expected = forward(model, lr)
    assert torch.allclose(super_resolve(model, lr, tile=12), expected, atol=1e-6)


@pytest.mark.parametrize("tile, overlap", [(0, 8), (4, -1)])
def test_tiled_forward_invalid(tile, overlap):
    with pytest.raises(ConfigurationError):
        tiled_forward(nearest_upsampler(2), torch.rand(1, 3, 8, 8), tile, overlap)


def test_infer_image(tmp_path):
    lr = np.round(np.random.default_rng(1).random((10, 12, 3)) * 255) / 255
    write_image(tmp_path / "in.png", lr)
    first = infer_image(nearest_upsampler(2), tmp_path / "in.png", tmp_path / "out" / "a.png")
    second = infer_image(
        nearest_upsampler(2), tmp_path / "in.png", tmp_path / "out" / "b.png", ensemble=True, tile=4
    )
    assert first.shape == (20, 24, 3)
    assert np.array_equal(first, second)
    assert np.array_equal(read_image(tmp_path / "out" / "a.png"), first)
    assert np.array_equal(first[::2, ::2], read_image(tmp_path / "in.png"))

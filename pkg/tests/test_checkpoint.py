import struct

import numpy as np
import pytest
import torch

from rcanit.checkpoint import MAGIC
from rcanit.checkpoint import Checkpoint
from rcanit.checkpoint import capture_rng
from rcanit.checkpoint import from_bytes
from rcanit.checkpoint import load_checkpoint
from rcanit.checkpoint import restore_model
from rcanit.checkpoint import restore_rng
from rcanit.checkpoint import save_checkpoint
from rcanit.checkpoint import to_bytes
from rcanit.exceptions import CheckpointError
from rcanit.exceptions import CheckpointVersionError
from rcanit.model import build_model
from rcanit.model import forward


@pytest.fixture
def checkpoint(tiny_config):
    model = build_model(tiny_config, 0)
    state = {f"exp_avg/{name}": torch.full_like(p, 0.5) for name, p in model.named_parameters()}
    return Checkpoint.from_model(
        model,
        optimizer_state=state,
        optimizer_step=7,
        iteration=7,
        rng_state=capture_rng(np.random.default_rng(3), torch.Generator().manual_seed(3)),
        train_config={"batch_size": 2, "stochastic_depth_p": 0.0},
        history={"loss": [[1, 0.5], [2, 0.25]]},
        stages=[{"stage": "train", "iters": 7}],
    )


def test_roundtrip_is_canonical(checkpoint):
    data = to_bytes(checkpoint)
    assert data.startswith(MAGIC)
    loaded = from_bytes(data)
    assert to_bytes(loaded) == data
    assert loaded.model_config == checkpoint.model_config
    assert loaded.iteration == 7 and loaded.optimizer_step == 7
    assert loaded.history == checkpoint.history
    assert loaded.stage == "train"
    assert loaded.init == checkpoint.init
    for name, tensor in checkpoint.params.items():
        assert torch.equal(loaded.params[name], tensor)
    assert list(loaded.optimizer_state) == list(checkpoint.optimizer_state)


def test_restore_model(checkpoint):
    model = restore_model(checkpoint)
    reference = build_model(checkpoint.model_config, 0)
    x = torch.rand(1, 3, 8, 8)
    with torch.no_grad():
        assert torch.equal(forward(model, x), forward(reference, x))


def test_restore_model_name_mismatch(checkpoint):
    checkpoint.params.pop("head.bias")
    with pytest.raises(CheckpointError, match="head.bias"):
        restore_model(checkpoint)


@pytest.mark.parametrize(
    "tensor",
    [
        torch.arange(6, dtype=torch.float64).reshape(2, 3),
        torch.tensor([1.5, -2.0], dtype=torch.float16),
        torch.tensor([1.5, -2.0], dtype=torch.bfloat16),
        torch.tensor([[1, 2]], dtype=torch.int64),
        torch.tensor([3], dtype=torch.int32),
        torch.tensor([0, 255], dtype=torch.uint8),
        torch.tensor([True, False]),
        torch.tensor(3.25),
        torch.zeros(0, 4),
    ],
    ids=["f64", "f16", "bf16", "i64", "i32", "u8", "bool", "scalar", "empty"],
)
def test_tensor_records(checkpoint, tensor):
    checkpoint.optimizer_state = {"extra": tensor}
    loaded = from_bytes(to_bytes(checkpoint)).optimizer_state["extra"]
    assert loaded.dtype == tensor.dtype
    assert loaded.shape == tensor.shape
    assert torch.equal(loaded, tensor)


def test_unsupported_dtype(checkpoint):
    checkpoint.optimizer_state = {"z": torch.zeros(2, dtype=torch.complex64)}
    with pytest.raises(CheckpointError):
        to_bytes(checkpoint)


def test_bad_magic(checkpoint):
    data = b"NOTACKPT" + to_bytes(checkpoint)[8:]
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(data)


def test_newer_major_version(checkpoint):
    data = bytearray(to_bytes(checkpoint))
    data[8:10] = struct.pack("<H", 2)
    with pytest.raises(CheckpointVersionError):
        from_bytes(bytes(data))


def test_newer_minor_version_is_checksummed(checkpoint):
    data = bytearray(to_bytes(checkpoint))
    data[10:12] = struct.pack("<H", 3)
    with pytest.raises(CheckpointError, match="checksum"):
        from_bytes(bytes(data))


def test_corrupt_byte(checkpoint):
    data = bytearray(to_bytes(checkpoint))
    data[len(data) // 2] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        from_bytes(bytes(data))


@pytest.mark.parametrize("keep", [4, 20, -1, -100])
def test_truncated(checkpoint, keep):
    data = to_bytes(checkpoint)
    with pytest.raises(CheckpointError):
        from_bytes(data[:keep])


def test_rng_restore_replays_draws(checkpoint):
    np_rng, generator = restore_rng(from_bytes(to_bytes(checkpoint)).rng_state)
    reference_np = np.random.default_rng(3)
    reference_torch = torch.Generator().manual_seed(3)
    assert np.array_equal(np_rng.random(5), reference_np.random(5))
    assert torch.equal(torch.rand(5, generator=generator), torch.rand(5, generator=reference_torch))


def test_rng_capture_mid_stream():
    np_rng = np.random.default_rng(0)
    generator = torch.Generator().manual_seed(0)
    np_rng.random(10)
    torch.rand(10, generator=generator)
    state = capture_rng(np_rng, generator)
    expected = (np_rng.integers(0, 1000, 4), torch.randint(0, 1000, (4,), generator=generator))
    restored_np, restored_torch = restore_rng(state)
    assert np.array_equal(restored_np.integers(0, 1000, 4), expected[0])
    assert torch.equal(torch.randint(0, 1000, (4,), generator=restored_torch), expected[1])


def test_save_and_load(tmp_path, checkpoint):
    path = save_checkpoint(checkpoint, tmp_path / "runs" / "train.ckpt")
    assert path.is_file()
    assert not (tmp_path / "runs" / "train.ckpt.tmp").exists()
    assert to_bytes(load_checkpoint(path)) == to_bytes(checkpoint)


def test_load_missing(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_repr(checkpoint):
    assert repr(checkpoint) == f"<Checkpoint(scale=2, iteration=7, stage=train, tensors={len(checkpoint.params)})>"

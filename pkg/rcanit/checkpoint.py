"""Single-file checkpoint container.

Byte layout, all integers little-endian::

    b"RCANITCK"                 magic
    u16 major, u16 minor        format version
    u32 header_len, header      UTF-8 JSON, sorted keys
    u32 n_param_records, records
    u32 n_optim_records, records
    u32 rng_len, rng            UTF-8 JSON, sorted keys
    u32 crc32                   of every preceding byte

    record := u16 name_len, name (UTF-8), u8 dtype_code, u8 ndim,
              u64 dim * ndim, u64 nbytes, raw little-endian data

Tensor data is written in host byte order; only little-endian hosts are supported.
Serialization is canonical, so save -> load -> save yields identical bytes.
"""

import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Dict
from typing import List
from typing import Optional
from typing import Tuple

import numpy as np
import torch

from rcanit.exceptions import CheckpointError
from rcanit.exceptions import CheckpointVersionError
from rcanit.model import INIT_SCHEME
from rcanit.model import RCAN
from rcanit.model import ModelConfig

LOGGER = logging.getLogger(__name__)

MAGIC = b"RCANITCK"
FORMAT_MAJOR = 1
FORMAT_MINOR = 0

DTYPE_CODES = {
    torch.float32: 1,
    torch.float64: 2,
    torch.float16: 3,
    torch.bfloat16: 4,
    torch.int64: 5,
    torch.int32: 6,
    torch.uint8: 7,
    torch.bool: 8,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}

Tensors = Dict[str, torch.Tensor]


@dataclass
class Checkpoint:
    """Parameters, optimizer state and provenance of a training run.

    `iteration` is the total over all `stages`; `history` maps a metric name
    to ``[iteration, value]`` pairs.
    """

    model_config: ModelConfig
    params: Tensors
    optimizer_state: Tensors = field(default_factory=dict)
    optimizer_step: int = 0
    iteration: int = 0
    rng_state: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    history: Dict[str, List[List[float]]] = field(default_factory=dict)
    stages: List[dict] = field(default_factory=list)
    init: str = INIT_SCHEME

    @property
    def scale(self) -> int:
        return self.model_config.scale

    @property
    def stage(self) -> Optional[str]:
        return self.stages[-1]["stage"] if self.stages else None

    def header(self) -> dict:
        return {
            "model_config": self.model_config.to_dict(),
            "optimizer_step": self.optimizer_step,
            "iteration": self.iteration,
            "train_config": self.train_config,
            "history": self.history,
            "stages": self.stages,
            "init": self.init,
        }

    @classmethod
    def from_model(cls, model: RCAN, **kwargs) -> "Checkpoint":
        params = {name: p.detach().cpu().clone() for name, p in model.named_parameters()}
        return cls(model_config=model.config, params=params, **kwargs)

    def __repr__(self):
        return (
            f"<Checkpoint(scale={self.scale}, iteration={self.iteration},"
            f" stage={self.stage}, tensors={len(self.params)})>"
        )


def restore_model(ckpt: Checkpoint) -> RCAN:
    """Fresh model with the checkpoint's parameters loaded."""
    model = RCAN(ckpt.model_config)
    missing = set(dict(model.named_parameters())) ^ set(ckpt.params)
    if missing:
        raise CheckpointError(f"parameter names do not match the model: {sorted(missing)[:5]}")
    model.load_state_dict(ckpt.params, strict=True)
    model.set_stochastic_depth(ckpt.train_config.get("stochastic_depth_p", 0.0))
    return model


def capture_rng(np_rng: np.random.Generator, generator: torch.Generator) -> dict:
    return {
        "numpy": np_rng.bit_generator.state,
        "torch": generator.get_state().numpy().tobytes().hex(),
    }


def restore_rng(state: dict) -> Tuple[np.random.Generator, torch.Generator]:
    np_rng = np.random.default_rng()
    np_rng.bit_generator.state = state["numpy"]
    generator = torch.Generator()
    generator.set_state(torch.frombuffer(bytearray.fromhex(state["torch"]), dtype=torch.uint8))
    return np_rng, generator


def _dumps(data) -> bytes:
    return json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _tensor_bytes(tensor: torch.Tensor) -> bytes:
    flat = tensor.detach().cpu().contiguous().reshape(-1)
    if not flat.numel():
        return b""
    return flat.view(torch.uint8).numpy().tobytes()


def _encode_records(tensors: Tensors) -> bytes:
    chunks = [struct.pack("<I", len(tensors))]
    for name, tensor in tensors.items():
        if tensor.dtype not in DTYPE_CODES:
            raise CheckpointError(f"'{name}': unsupported dtype {tensor.dtype}")
        encoded = name.encode("utf-8")
        data = _tensor_bytes(tensor)
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", DTYPE_CODES[tensor.dtype], tensor.dim()))
        chunks.append(struct.pack(f"<{tensor.dim()}Q", *tensor.shape))
        chunks.append(struct.pack("<Q", len(data)))
        chunks.append(data)
    return b"".join(chunks)


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = _dumps(ckpt.header())
    rng = _dumps(ckpt.rng_state)
    body = b"".join(
        [
            MAGIC,
            struct.pack("<HH", FORMAT_MAJOR, FORMAT_MINOR),
            struct.pack("<I", len(header)),
            header,
            _encode_records(ckpt.params),
            _encode_records(ckpt.optimizer_state),
            struct.pack("<I", len(rng)),
            rng,
        ]
    )
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise CheckpointError(f"truncated checkpoint: need {size} bytes at offset {self.pos}")
        chunk = self.data[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str):
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return values if len(values) > 1 else values[0]

    def records(self) -> Tensors:
        tensors = {}
        for _ in range(self.unpack("<I")):
            name = self.take(self.unpack("<H")).decode("utf-8")
            code, ndim = self.unpack("<BB")
            if code not in CODE_DTYPES:
                raise CheckpointError(f"'{name}': unknown dtype code {code}")
            dtype = CODE_DTYPES[code]
            dims = self.unpack(f"<{ndim}Q") if ndim else ()
            dims = (dims,) if isinstance(dims, int) else tuple(dims)
            data = self.take(self.unpack("<Q"))
            expected = int(np.prod(dims, dtype=np.int64)) * torch.empty((), dtype=dtype).element_size()
            if len(data) != expected:
                raise CheckpointError(f"'{name}': {len(data)} bytes for shape {dims}")
            if not data:
                tensors[name] = torch.empty(dims, dtype=dtype)
                continue
            tensors[name] = torch.frombuffer(bytearray(data), dtype=dtype).reshape(dims)
        return tensors


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 8 or not data.startswith(MAGIC):
        raise CheckpointError("not an rcanit checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    reader = _Reader(body)
    reader.take(len(MAGIC))
    major, minor = reader.unpack("<HH")
    if major != FORMAT_MAJOR:
        raise CheckpointVersionError(
            f"checkpoint format {major}.{minor} is not readable by format {FORMAT_MAJOR}.{FORMAT_MINOR}"
        )
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")
    try:
        header = json.loads(reader.take(reader.unpack("<I")).decode("utf-8"))
        params = reader.records()
        optimizer_state = reader.records()
        rng_state = json.loads(reader.take(reader.unpack("<I")).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    if reader.pos != len(body):
        raise CheckpointError(f"{len(body) - reader.pos} trailing bytes in checkpoint")
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        params=params,
        optimizer_state=optimizer_state,
        optimizer_step=header["optimizer_step"],
        iteration=header["iteration"],
        rng_state=rng_state,
        train_config=header["train_config"],
        history=header["history"],
        stages=header["stages"],
        init=header["init"],
    )


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)
    LOGGER.info(f"saved checkpoint {path} (iteration {ckpt.iteration}, stage {ckpt.stage})")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    ckpt = from_bytes(path.read_bytes())
    LOGGER.debug(f"loaded {ckpt!r} from {path}")
    return ckpt

"""RCAN family architecture: shallow head, residual-in-residual body with channel
attention, and a scale-specific pixel-shuffle tail.

Parameter names are the warm-start contract and must stay stable:
``head.*``, ``body.group{i}.block{j}.*``, ``body.group{i}.tailconv.*``, ``tail.*``.
"""

import copy
import logging
import math
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import replace
from typing import Callable
from typing import Dict
from typing import List
from typing import Optional
from typing import Tuple
from typing import Union

import torch
import torch.nn.functional as F
from torch import nn

from rcanit.exceptions import ConfigurationError
from rcanit.exceptions import ShapeError
from rcanit.utils.helpers import torch_generator

LOGGER = logging.getLogger(__name__)

SUPPORTED_SCALES = (2, 3, 4)
ACTIVATIONS = ("relu", "silu")
INIT_SCHEME = "kaiming_uniform_fan_in"
PARTITIONS = ("head", "body", "tail")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; validated on construction."""

    scale: int = 2
    n_groups: int = 10
    n_blocks_per_group: int = 20
    n_feats: int = 64
    reduction: int = 16
    activation: str = "relu"
    in_channels: int = 3
    mean_shift: Optional[Tuple[float, ...]] = None
    res_scale: float = 1.0

    def __post_init__(self):
        if self.scale not in SUPPORTED_SCALES:
            raise ConfigurationError("scale", f"{self.scale} not in {SUPPORTED_SCALES}")
        for name in ("n_groups", "n_blocks_per_group", "n_feats", "reduction", "in_channels"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(name, f"must be a positive integer, got {value!r}")
        if self.n_feats % self.reduction:
            raise ConfigurationError(
                "n_feats", f"{self.n_feats} is not divisible by reduction {self.reduction}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError("activation", f"{self.activation!r} not in {ACTIVATIONS}")
        if self.mean_shift is not None:
            shift = tuple(float(v) for v in self.mean_shift)
            if len(shift) != self.in_channels or not all(0.0 <= v <= 1.0 for v in shift):
                raise ConfigurationError(
                    "mean_shift", f"expected {self.in_channels} values in [0, 1], got {shift}"
                )
            object.__setattr__(self, "mean_shift", shift)

    def to_dict(self) -> dict:
        data = asdict(self)
        if self.mean_shift is not None:
            data["mean_shift"] = list(self.mean_shift)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        if data.get("mean_shift") is not None:
            data["mean_shift"] = tuple(data["mean_shift"])
        return cls(**data)


def silu(x: torch.Tensor) -> torch.Tensor:
    """Sigmoid linear unit, x * sigmoid(x)."""
    return x * torch.sigmoid(x)


def activate(x: torch.Tensor, kind: str) -> torch.Tensor:
    return silu(x) if kind == "silu" else F.relu(x)


def channel_attention(
    features: torch.Tensor,
    squeeze_weight: torch.Tensor,
    squeeze_bias: Optional[torch.Tensor],
    excite_weight: torch.Tensor,
    excite_bias: Optional[torch.Tensor],
    activation: str = "relu",
) -> torch.Tensor:
    """Rescale each channel of `features` by a gate in (0, 1).

    Gates come from global average pooling followed by a 1x1 conv bottleneck
    C -> C/r -> C and a sigmoid.
    """
    channels = features.shape[1]
    if squeeze_weight.shape[1] != channels or excite_weight.shape[0] != channels:
        raise ShapeError(
            f"channel attention expects {squeeze_weight.shape[1]} channels, got {channels}"
        )
    pooled = features.mean(dim=(2, 3), keepdim=True)
    hidden = activate(F.conv2d(pooled, squeeze_weight, squeeze_bias), activation)
    gate = torch.sigmoid(F.conv2d(hidden, excite_weight, excite_bias))
    return features * gate


def stochastic_residual(
    x: torch.Tensor,
    branch: Callable[[torch.Tensor], torch.Tensor],
    p_skip: float = 0.0,
    training: bool = False,
    generator: Optional[torch.Generator] = None,
    res_scale: float = 1.0,
) -> torch.Tensor:
    """x + branch(x), with the branch dropped with probability `p_skip` while
    training and scaled by the survival probability at evaluation."""
    if p_skip <= 0.0:
        return x + res_scale * branch(x)
    if training:
        if torch.rand(1, generator=generator).item() < p_skip:
            return x
        return x + res_scale * branch(x)
    return x + (1.0 - p_skip) * res_scale * branch(x)


def conv3x3(in_channels: int, out_channels: int) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation gate over feature channels."""

    def __init__(self, channels: int, reduction: int, activation: str = "relu"):
        super().__init__()
        if channels % reduction:
            raise ShapeError(f"{channels} channels are not divisible by reduction {reduction}")
        self.activation = activation
        self.squeeze = nn.Conv2d(channels, channels // reduction, kernel_size=1)
        self.excite = nn.Conv2d(channels // reduction, channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return channel_attention(
            x,
            self.squeeze.weight,
            self.squeeze.bias,
            self.excite.weight,
            self.excite.bias,
            self.activation,
        )


class ResidualBlock(nn.Module):
    """conv3x3 -> activation -> conv3x3 -> channel attention, added to the input."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.activation = config.activation
        self.res_scale = config.res_scale
        self.conv1 = conv3x3(config.n_feats, config.n_feats)
        self.conv2 = conv3x3(config.n_feats, config.n_feats)
        self.attention = ChannelAttention(config.n_feats, config.reduction, config.activation)

    def branch(self, x: torch.Tensor) -> torch.Tensor:
        return self.attention(self.conv2(activate(self.conv1(x), self.activation)))

    def forward(self, x, p_skip: float = 0.0, generator=None):
        return stochastic_residual(x, self.branch, p_skip, self.training, generator, self.res_scale)


class ResidualGroup(nn.Module):
    """Residual blocks plus a trailing conv, wrapped in the group-level skip."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_blocks = config.n_blocks_per_group
        for j in range(self.n_blocks):
            self.add_module(f"block{j}", ResidualBlock(config))
        self.tailconv = conv3x3(config.n_feats, config.n_feats)

    def blocks(self) -> List[ResidualBlock]:
        return [getattr(self, f"block{j}") for j in range(self.n_blocks)]

    def forward(self, x, p_skip: float = 0.0, generator=None):
        h = x
        for block in self.blocks():
            h = block(h, p_skip, generator)
        return x + self.tailconv(h)


class Body(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_groups = config.n_groups
        for i in range(self.n_groups):
            self.add_module(f"group{i}", ResidualGroup(config))

    def groups(self) -> List[ResidualGroup]:
        return [getattr(self, f"group{i}") for i in range(self.n_groups)]

    def forward(self, x, p_skip: float = 0.0, generator=None):
        for group in self.groups():
            x = group(x, p_skip, generator)
        return x


class Tail(nn.Module):
    """Pixel-shuffle upsampler followed by the reconstruction conv.

    x2 and x3 use one conv + depth-to-space stage, x4 two cascaded x2 stages.
    """

    def __init__(self, scale: int, n_feats: int, out_channels: int):
        super().__init__()
        factors = [2, 2] if scale == 4 else [scale]
        layers: List[nn.Module] = []
        for factor in factors:
            layers.append(conv3x3(n_feats, factor * factor * n_feats))
            layers.append(nn.PixelShuffle(factor))
        self.upsampler = nn.Sequential(*layers)
        self.final = conv3x3(n_feats, out_channels)

    def forward(self, x):
        return self.final(self.upsampler(x))


class RCAN(nn.Module):
    """Residual channel attention network."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.stochastic_depth_p = 0.0
        self.head = conv3x3(config.in_channels, config.n_feats)
        self.body = Body(config)
        self.tail = Tail(config.scale, config.n_feats, config.in_channels)
        if config.mean_shift is not None:
            mean = torch.tensor(config.mean_shift, dtype=torch.float32).view(1, -1, 1, 1)
            self.register_buffer("mean", mean, persistent=False)
        else:
            self.mean = None

    def set_stochastic_depth(self, p_skip: float) -> None:
        if not 0.0 <= p_skip <= 1.0:
            raise ConfigurationError("stochastic_depth_p", f"must lie in [0, 1], got {p_skip}")
        self.stochastic_depth_p = float(p_skip)

    def head_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(x)

    def body_features(self, feats: torch.Tensor, generator=None) -> torch.Tensor:
        return self.body(feats, self.stochastic_depth_p, generator)

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None):
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected N x {self.config.in_channels} x H x W input, got {tuple(x.shape)}"
            )
        if x.shape[2] < 1 or x.shape[3] < 1:
            raise ShapeError(f"empty spatial dims {tuple(x.shape)}")
        if self.mean is not None:
            x = x - self.mean.to(x.dtype)
        feats = self.head_features(x)
        feats = feats + self.body_features(feats, generator)
        out = self.tail(feats)
        if self.mean is not None:
            out = out + self.mean.to(out.dtype)
        return out

    def partition(self) -> Dict[str, List[str]]:
        """Parameter names grouped into head / body / tail."""
        parts: Dict[str, List[str]] = {name: [] for name in PARTITIONS}
        for name, _ in self.named_parameters():
            parts[name.split(".", 1)[0]].append(name)
        return parts

    def __repr__(self):
        cfg = self.config
        return (
            f"<RCAN(scale={cfg.scale}, groups={cfg.n_groups}, blocks={cfg.n_blocks_per_group},"
            f" feats={cfg.n_feats}, activation={cfg.activation})>"
        )


def initialize_(module: nn.Module, generator: torch.Generator) -> None:
    """Uniform fan-in init, bound 1/sqrt(fan_in), for every conv; zero biases."""
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, nn.Conv2d):
                fan_in = sub.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                sub.weight.uniform_(-bound, bound, generator=generator)
                if sub.bias is not None:
                    sub.bias.zero_()


def _as_generator(rng: Union[torch.Generator, int, None]) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    return torch_generator(0 if rng is None else rng)


def build_model(config: ModelConfig, rng: Union[torch.Generator, int, None] = None) -> RCAN:
    """Build and initialize an RCAN from `config` and a seed or generator."""
    model = RCAN(config)
    initialize_(model, _as_generator(rng))
    LOGGER.debug(f"built {model!r} with {count_parameters(model)} parameters")
    return model


def forward(model: RCAN, x: torch.Tensor, train_mode: bool = False, generator=None):
    model.train(train_mode)
    return model(x, generator=generator)


def swap_tail(model: RCAN, new_scale: int, rng: Union[torch.Generator, int, None] = None) -> RCAN:
    """Copy of `model` with head/body kept bitwise and a fresh tail for `new_scale`."""
    if new_scale not in SUPPORTED_SCALES:
        raise ConfigurationError("scale", f"{new_scale} not in {SUPPORTED_SCALES}")
    config = replace(model.config, scale=new_scale)
    swapped = copy.deepcopy(model)
    swapped.config = config
    swapped.tail = Tail(new_scale, config.n_feats, config.in_channels)
    initialize_(swapped.tail, _as_generator(rng))
    LOGGER.info(f"swapped tail x{model.config.scale} -> x{new_scale}")
    return swapped


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())

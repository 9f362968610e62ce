"""Run configuration: packaged defaults and presets, flat ``key = value`` run
files and the user env file.

Resolution order: defaults -> preset (following ``extends``) -> run file ->
explicit overrides. Every value is coerced by the parser registered in
`KEYS`; unknown keys are rejected.
"""

import logging
import os
from copy import deepcopy
from pathlib import Path
from typing import Dict
from typing import List
from typing import Optional
from typing import Tuple

from box import Box
from dotenv import dotenv_values
from dotenv import load_dotenv

from rcanit.data import RejectionConfig
from rcanit.data import SamplerConfig
from rcanit.exceptions import ConfigurationError
from rcanit.model import ModelConfig
from rcanit.optim import OptimizerHyper
from rcanit.optim import ScheduleConfig
from rcanit.optim import scale_lr
from rcanit.trainer import TrainConfig
from rcanit.trainer import large_patch_batch
from rcanit.utils.helpers import load_file
from rcanit.utils.helpers import merge_dicts
from rcanit.utils.path import DEFAULT_SETTINGS

LOGGER = logging.getLogger(__name__)

RESOLVED_FILE = "resolved.cfg"


def get_config_path():
    """User config directory as per platform."""
    xdg_config_home = os.environ.get("XDG_CONFIG_HOME")

    if xdg_config_home:
        config_home = Path(xdg_config_home)
    else:
        config_home = Path.home() / ".config"

    return config_home / "rcanit"


DEFAULT_CONFIG_PATH = get_config_path() / "settings.yaml"
DEFAULT_ENV_PATH = get_config_path() / "env"

ENV_FILE = str(DEFAULT_ENV_PATH.absolute()) if DEFAULT_ENV_PATH.exists() else ""
load_dotenv(ENV_FILE)

DEVICE = os.getenv("RCANIT_DEVICE", "cpu")
NUM_THREADS = os.getenv("RCANIT_NUM_THREADS")


def _is_none(value) -> bool:
    return value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "null"))


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(value)


def _int(value) -> int:
    if isinstance(value, bool):
        raise ValueError(value)
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError(value)
        return int(value)
    return int(str(value).strip())


def _float(value) -> float:
    if isinstance(value, bool):
        raise ValueError(value)
    return float(str(value).strip()) if isinstance(value, str) else float(value)


def _str(value) -> str:
    return str(value).strip()


def _choice(*options):
    def parse(value) -> str:
        text = _str(value)
        if text not in options:
            raise ValueError(f"{text!r} not in {options}")
        return text

    return parse


def _mean_shift(value):
    if isinstance(value, str) and value.strip().lower() == "auto":
        return "auto"
    items = value.split(",") if isinstance(value, str) else list(value)
    shift = tuple(_float(item) for item in items)
    if len(shift) != 3:
        raise ValueError(value)
    return shift


def _optional(parse):
    def inner(value):
        return None if _is_none(value) else parse(value)

    return inner


KEYS = {
    "scale": _int,
    "n_groups": _int,
    "n_blocks_per_group": _int,
    "n_feats": _int,
    "reduction": _int,
    "activation": _choice("relu", "silu"),
    "in_channels": _int,
    "mean_shift": _optional(_mean_shift),
    "res_scale": _float,
    "batch_size": _int,
    "lr": _optional(_float),
    "base_lr": _float,
    "base_batch_size": _int,
    "total_iters": _int,
    "optimizer": _choice("adam", "lamb"),
    "beta1": _float,
    "beta2": _optional(_float),
    "eps": _optional(_float),
    "weight_decay": _float,
    "grad_clip": _optional(_float),
    "schedule": _choice("cosine", "multistep"),
    "eta_min": _float,
    "warmup_iters": _int,
    "precision": _choice("fp32", "fp16_mixed"),
    "stochastic_depth_p": _float,
    "patch_size": _int,
    "geo_aug": _bool,
    "color_aug": _bool,
    "mixup_alpha": _optional(_float),
    "rejection": _bool,
    "rejection_threshold_db": _float,
    "reject_prob": _float,
    "finetune_iters": _int,
    "finetune_patch_size": _int,
    "finetune_batch_size": _optional(_int),
    "warm_tail_iters": _int,
    "warm_full_iters": _optional(_int),
    "base_iters": _int,
    "oracle_iters": _int,
    "eval_every": _int,
    "log_every": _int,
    "checkpoint_every": _int,
    "val_count": _int,
    "workers": _int,
    "seed": _int,
    "data_root": _optional(_str),
    "out_dir": _str,
    "device": _optional(_str),
    "ensemble": _bool,
    "crop_border": _optional(_int),
    "y_swing": _choice("studio", "full"),
    "quantize": _bool,
    "tile": _optional(_int),
    "tile_overlap": _int,
}

PRESET_META = ("extends", "description")


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def coerce(values: dict) -> Dict[str, object]:
    """Parse raw values through `KEYS`; unknown keys and bad values raise."""
    parsed = {}
    for key, raw in values.items():
        if key not in KEYS:
            raise ConfigurationError(key, "unknown configuration key")
        try:
            parsed[key] = KEYS[key](raw)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(key, f"invalid value {raw!r}") from exc
    return parsed


def load_settings(config_path=None) -> Box:
    """Packaged defaults and presets, overlaid with the user settings file if present."""
    settings = load_file(DEFAULT_SETTINGS)
    config_path = Path(config_path) if config_path else DEFAULT_CONFIG_PATH
    if config_path.exists():
        LOGGER.info(f"reading user settings from: {config_path.absolute()}")
        settings = merge_dicts(settings, load_file(config_path))
    return Box(settings)


def preset_names(settings: Optional[Box] = None) -> List[str]:
    settings = settings or load_settings()
    return list(settings.presets)


def preset_description(name: str, settings: Optional[Box] = None) -> str:
    settings = settings or load_settings()
    return settings.presets[name].get("description", "")


def preset_values(name: str, settings: Optional[Box] = None) -> dict:
    """Flat overlay of preset `name` with its ``extends`` chain applied."""
    settings = settings or load_settings()
    chain = []
    while name is not None:
        if name not in settings.presets:
            raise ConfigurationError("preset", f"unknown preset {name!r}")
        if name in chain:
            raise ConfigurationError("preset", f"cyclic extends through {name!r}")
        chain.append(name)
        name = settings.presets[name].get("extends")
    values = {}
    for link in reversed(chain):
        values.update(
            {k: v for k, v in settings.presets[link].to_dict().items() if k not in PRESET_META}
        )
    return values


def read_run_file(path) -> dict:
    """Flat ``key = value`` file as a raw dict."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError("config", f"config file '{path}' does not exist")
    return dict(dotenv_values(path, encoding="utf-8"))


def parse_assignments(items) -> dict:
    """``["key=value", ...]`` as a raw dict."""
    values = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(item, "expected key=value")
        values[key.strip()] = value.strip()
    return values


class RunConfig:
    """Fully resolved flat configuration of one command."""

    def __init__(self, values: dict):
        missing = set(KEYS) - set(values)
        if missing:
            raise ConfigurationError(sorted(missing)[0], "missing configuration key")
        self.values = Box(coerce(values))
        if self.values.lr is None:
            self.values.lr = scale_lr(
                self.values.base_lr, self.values.base_batch_size, self.values.batch_size
            )

    @classmethod
    def resolve(cls, preset=None, config_path=None, overrides=None, settings=None) -> "RunConfig":
        settings = settings or load_settings()
        values = deepcopy(settings.default.to_dict())
        if preset:
            values.update(preset_values(preset, settings))
        if config_path:
            values.update(coerce(read_run_file(config_path)))
        if overrides:
            values.update(coerce({k: v for k, v in overrides.items() if v is not None}))
        return cls(values)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.resolve(config_path=path)

    def __getattr__(self, name):
        values = self.__dict__.get("values")
        if values is not None and name in values:
            return values[name]
        raise AttributeError(name)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values.to_dict() == other.values.to_dict()

    def replace(self, **changes) -> "RunConfig":
        values = self.values.to_dict()
        values.update(coerce(changes))
        return RunConfig(values)

    @property
    def resolved_device(self) -> str:
        return self.values.device or DEVICE

    def model_config(self, mean_shift=None) -> ModelConfig:
        v = self.values
        shift = v.mean_shift if mean_shift is None else mean_shift
        if shift == "auto":
            raise ConfigurationError("mean_shift", "'auto' needs the dataset meta.json")
        return ModelConfig(
            scale=v.scale,
            n_groups=v.n_groups,
            n_blocks_per_group=v.n_blocks_per_group,
            n_feats=v.n_feats,
            reduction=v.reduction,
            activation=v.activation,
            in_channels=v.in_channels,
            mean_shift=shift,
            res_scale=v.res_scale,
        )

    def sampler_config(self) -> SamplerConfig:
        v = self.values
        rejection = None
        if v.rejection:
            rejection = RejectionConfig(v.rejection_threshold_db, v.reject_prob)
        return SamplerConfig(
            patch_size=v.patch_size,
            geo_aug=v.geo_aug,
            color_aug=v.color_aug,
            mixup_alpha=v.mixup_alpha,
            rejection=rejection,
            seed=v.seed,
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            batch_size=v.batch_size,
            total_iters=v.total_iters,
            optimizer=OptimizerHyper(
                kind=v.optimizer,
                lr=v.lr,
                beta1=v.beta1,
                beta2=v.beta2,
                eps=v.eps,
                weight_decay=v.weight_decay,
                grad_clip=v.grad_clip,
            ),
            schedule=ScheduleConfig(
                kind=v.schedule,
                total_iters=v.total_iters,
                eta_min=v.eta_min,
                warmup_iters=v.warmup_iters,
            ),
            sampler=self.sampler_config(),
            precision=v.precision,
            stochastic_depth_p=v.stochastic_depth_p,
            eval_every=v.eval_every,
            log_every=v.log_every,
            checkpoint_every=v.checkpoint_every,
            val_count=v.val_count,
            workers=v.workers,
            seed=v.seed,
        )

    @property
    def finetune_batch(self) -> int:
        if self.values.finetune_batch_size is not None:
            return self.values.finetune_batch_size
        return large_patch_batch(
            self.values.batch_size, self.values.finetune_patch_size, self.values.patch_size
        )

    @property
    def warm_full(self) -> int:
        if self.values.warm_full_iters is not None:
            return self.values.warm_full_iters
        return self.values.base_iters // 2

    def stage_plan(self, command: str = "train") -> List[Tuple[str, int]]:
        v = self.values
        if command == "warm-start":
            return [("warm_tail", v.warm_tail_iters), ("warm_full", self.warm_full)]
        if command == "oracle":
            return [("oracle", v.oracle_iters)]
        plan = [("train", v.total_iters)]
        if v.finetune_iters:
            plan.append(("large_patch", v.finetune_iters))
        return plan

    def to_lines(self) -> List[str]:
        lines = [f"{key} = {format_value(self.values[key])}" for key in sorted(KEYS)]
        return lines

    def write(self, path) -> Path:
        path = Path(path)
        if path.is_dir():
            path = path / RESOLVED_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")
        LOGGER.info(f"wrote resolved config to {path}")
        return path

    def __repr__(self):
        return f"<RunConfig(scale={self.values.scale}, iters={self.values.total_iters})>"

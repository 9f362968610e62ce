"""Training loop and the procedures built on it: plain training, large-patch
finetuning, the two-stage warm start and oracle finetuning on a benchmark."""

import logging
import math
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from pathlib import Path
from typing import Callable
from typing import Iterable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
import torch
from cached_property import cached_property

from rcanit.benchmark import Protocol
from rcanit.benchmark import evaluate_entries
from rcanit.checkpoint import Checkpoint
from rcanit.checkpoint import capture_rng
from rcanit.checkpoint import restore_model
from rcanit.checkpoint import save_checkpoint
from rcanit.data import IndexEntry
from rcanit.data import SamplerConfig
from rcanit.data import make_batch_stream
from rcanit.data import scan_dataset
from rcanit.data import split_index
from rcanit.exceptions import ConfigurationError
from rcanit.exceptions import NonFiniteError
from rcanit.exceptions import ShapeError
from rcanit.model import PARTITIONS
from rcanit.model import RCAN
from rcanit.model import swap_tail
from rcanit.optim import PRECISIONS
from rcanit.optim import LayerwiseOptimizer
from rcanit.optim import OptimizerHyper
from rcanit.optim import ScheduleConfig
from rcanit.optim import apply_precision_policy
from rcanit.optim import build_optimizer
from rcanit.optim import lr_at
from rcanit.utils.helpers import torch_generator

LOGGER = logging.getLogger(__name__)

BASE_PATCH = 48
LARGE_PATCH = 64
WARM_SOURCE_SCALE = 2
WARM_TARGET_SCALES = (3, 4)

LossHook = Callable[[int, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class TrainConfig:
    """One training stage. The schedule always spans `total_iters`."""

    batch_size: int = 256
    total_iters: int = 80_000
    optimizer: OptimizerHyper = field(default_factory=OptimizerHyper)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    precision: str = "fp32"
    stochastic_depth_p: float = 0.0
    eval_every: int = 0
    log_every: int = 100
    checkpoint_every: int = 0
    val_count: int = 10
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.total_iters < 1:
            raise ConfigurationError("total_iters", f"must be >= 1, got {self.total_iters}")
        if self.precision not in PRECISIONS:
            raise ConfigurationError("precision", f"{self.precision!r} not in {PRECISIONS}")
        if not 0.0 <= self.stochastic_depth_p <= 1.0:
            raise ConfigurationError(
                "stochastic_depth_p", f"must lie in [0, 1], got {self.stochastic_depth_p}"
            )
        for name in ("eval_every", "checkpoint_every", "val_count"):
            if getattr(self, name) < 0:
                raise ConfigurationError(name, f"must be >= 0, got {getattr(self, name)}")
        if self.log_every < 1:
            raise ConfigurationError("log_every", f"must be >= 1, got {self.log_every}")
        if self.sampler.mixup_alpha is not None and self.batch_size < 2:
            raise ConfigurationError("batch_size", "mixup needs a batch of at least 2")
        if self.schedule.total_iters != self.total_iters:
            object.__setattr__(
                self, "schedule", replace(self.schedule, total_iters=self.total_iters)
            )

    @property
    def lr(self) -> float:
        return self.optimizer.lr

    @property
    def patch_size(self) -> int:
        return self.sampler.patch_size

    def with_iters(self, iters: int) -> "TrainConfig":
        return replace(self, total_iters=iters)

    def to_dict(self) -> dict:
        return asdict(self)


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over all elements."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return torch.mean(torch.abs(pred - target))


def nan_guard(
    loss: torch.Tensor,
    named_params: Iterable[Tuple[str, torch.Tensor]],
    t: int,
    seed: int = 0,
    lr: float = 0.0,
) -> None:
    """Raise NonFiniteError if the loss or any parameter holds NaN/inf."""
    if not bool(torch.isfinite(loss).all()):
        raise NonFiniteError(t, "loss", seed, lr)
    for name, param in named_params:
        if not bool(torch.isfinite(param).all()):
            raise NonFiniteError(t, name, seed, lr)


def stochastic_depth_forward(
    model: RCAN, x: torch.Tensor, p_skip: float, rng: Optional[torch.Generator] = None
) -> torch.Tensor:
    """Training-mode forward with every residual block dropped with probability `p_skip`."""
    previous = model.stochastic_depth_p
    model.set_stochastic_depth(p_skip)
    model.train()
    try:
        return model(x, generator=rng)
    finally:
        model.set_stochastic_depth(previous)


class PlateauCriterion:
    """Stop once the tracked score improves by less than `min_delta_db` over
    `patience` consecutive evaluations."""

    def __init__(self, min_delta_db: float = 0.01, patience: int = 2):
        self.min_delta_db = min_delta_db
        self.patience = patience
        self.best: Optional[float] = None
        self.stale = 0

    def update(self, score: float) -> bool:
        if self.best is None or score - self.best >= self.min_delta_db:
            self.best = score if self.best is None else max(self.best, score)
            self.stale = 0
            return False
        self.best = max(self.best, score)
        self.stale += 1
        return self.stale >= self.patience

    def __repr__(self):
        return f"<PlateauCriterion(best={self.best}, stale={self.stale}/{self.patience})>"


class Trainer:
    """Runs one stage on `model` and returns its checkpoint.

    Args:
        model: network trained in place.
        index: training entries; the validation split is carved out of it by
            `cfg.val_count` unless `val_index` is given.
        stage: name recorded in the checkpoint provenance.
        trainable: partitions handed to the optimizer; the rest stays frozen.
        base: checkpoint this stage continues (provenance and history).
        stop_rule: checked after each evaluation; ends the stage early.
        loss_hook: called with (t, loss) before the guard, used to inject faults.
    """

    def __init__(
        self,
        model: RCAN,
        index: Sequence[IndexEntry],
        cfg: TrainConfig,
        stage: str = "train",
        trainable: Sequence[str] = PARTITIONS,
        val_index: Optional[Sequence[IndexEntry]] = None,
        base: Optional[Checkpoint] = None,
        stop_rule: Optional[PlateauCriterion] = None,
        out_dir=None,
        device: str = "cpu",
        loss_hook: Optional[LossHook] = None,
    ):
        unknown = set(trainable) - set(PARTITIONS)
        if unknown:
            raise ConfigurationError("trainable", f"unknown partitions {sorted(unknown)}")
        self.model = model
        self.index = list(index)
        self.cfg = cfg
        self.stage = stage
        self.trainable = tuple(trainable)
        self._val_index = None if val_index is None else list(val_index)
        self.base = base
        self.stop_rule = stop_rule
        self.out_dir = None if out_dir is None else Path(out_dir)
        self.device = torch.device(device)
        self.loss_hook = loss_hook
        self.loss_trace: List[float] = []
        self.history = {"loss": [], "val_psnr": []}
        self.np_rng = np.random.default_rng([cfg.seed, 0])
        self.generator = torch_generator(cfg.seed)

    @cached_property
    def splits(self) -> Tuple[List[IndexEntry], List[IndexEntry]]:
        if self._val_index is not None:
            return self.index, self._val_index
        if len(self.index) <= self.cfg.val_count:
            raise ConfigurationError(
                "val_count",
                f"{self.cfg.val_count} held-out images leave none of {len(self.index)} for training",
            )
        return split_index(self.index, self.cfg.val_count)

    @cached_property
    def stream(self):
        train_index, _ = self.splits
        return make_batch_stream(
            train_index,
            self.model.config.scale,
            self.cfg.sampler,
            self.cfg.batch_size,
            rng=self.np_rng,
            workers=self.cfg.workers,
        )

    @property
    def offset(self) -> int:
        return self.base.iteration if self.base is not None else 0

    def trainable_parameters(self):
        return [
            (name, param)
            for name, param in self.model.named_parameters()
            if name.split(".", 1)[0] in self.trainable
        ]

    def validate(self) -> float:
        _, val_index = self.splits
        scale = self.model.config.scale
        report = evaluate_entries(self.model, val_index, Protocol(scale=scale, crop_border=scale))
        self.model.train()
        return report.aggregate[0]

    def _record_eval(self, done: int) -> bool:
        score = self.validate()
        self.history["val_psnr"].append([self.offset + done, score])
        LOGGER.info(f"[{self.stage}] iteration {done}: val PSNR {score:.4f} dB")
        if self.stop_rule is not None and self.stop_rule.update(score):
            LOGGER.warning(f"[{self.stage}] validation PSNR plateaued, stopping at iteration {done}")
            return True
        return False

    def checkpoint(self, optimizer: LayerwiseOptimizer, done: int) -> Checkpoint:
        base = self.base
        stages = (list(base.stages) if base else []) + [{"stage": self.stage, "iters": done}]
        history = {key: list(values) for key, values in (base.history if base else {}).items()}
        for key, values in self.history.items():
            history.setdefault(key, []).extend(values)
        return Checkpoint.from_model(
            self.model,
            optimizer_state=optimizer.named_state(),
            optimizer_step=optimizer.step_count,
            iteration=sum(stage["iters"] for stage in stages),
            rng_state=capture_rng(self.np_rng, self.generator),
            train_config=self.cfg.to_dict(),
            history=history,
            stages=stages,
        )

    def _save(self, ckpt: Checkpoint, suffix: str = "") -> None:
        if self.out_dir is not None:
            save_checkpoint(ckpt, self.out_dir / f"{self.stage}{suffix}.ckpt")

    def run(self) -> Checkpoint:
        cfg = self.cfg
        model = self.model.to(self.device)
        params = self.trainable_parameters()
        kept = {id(param) for _, param in params}
        frozen = [param for param in model.parameters() if id(param) not in kept]
        for param in frozen:
            param.requires_grad_(False)
        optimizer = build_optimizer(params, cfg.optimizer)
        precision = apply_precision_policy(cfg.precision, self.device.type)
        model.set_stochastic_depth(cfg.stochastic_depth_p)
        _, val_index = self.splits
        LOGGER.info(
            f"[{self.stage}] {cfg.total_iters} iterations, batch {cfg.batch_size},"
            f" patch {cfg.patch_size}, lr {cfg.lr}, training {','.join(self.trainable)}"
        )

        window: List[float] = []
        done = 0
        evaluated = False
        try:
            model.train()
            for t in range(cfg.total_iters):
                lr_t = lr_at(t, cfg.schedule, cfg.lr)
                batch = next(self.stream)
                with precision.autocast():
                    pred = model(batch.lr.to(self.device), generator=self.generator)
                loss = l1_loss(pred.float(), batch.hr.to(self.device))
                if self.loss_hook is not None:
                    loss = self.loss_hook(t, loss)
                nan_guard(loss, model.named_parameters(), t, cfg.seed, lr_t)
                precision.backward(loss)
                precision.step(optimizer, lr_t)
                nan_guard(loss.detach(), params, t, cfg.seed, lr_t)

                done = t + 1
                value = float(loss.detach())
                self.loss_trace.append(value)
                window.append(value)
                evaluated = False
                if done % cfg.log_every == 0:
                    mean = math.fsum(window) / len(window)
                    self.history["loss"].append([self.offset + done, mean])
                    window = []
                    LOGGER.debug(f"[{self.stage}] iteration {done}: l1 {mean:.6f} lr {lr_t:.3e}")
                if cfg.eval_every and val_index and done % cfg.eval_every == 0:
                    evaluated = True
                    if self._record_eval(done):
                        break
                if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                    self._save(self.checkpoint(optimizer, done), "_latest")
            if val_index and done and not evaluated:
                self._record_eval(done)
        finally:
            for param in frozen:
                param.requires_grad_(True)

        ckpt = self.checkpoint(optimizer, done)
        self._save(ckpt)
        LOGGER.info(f"[{self.stage}] finished after {done} iterations ({ckpt.iteration} total)")
        return ckpt

    def __repr__(self):
        return f"<Trainer(stage={self.stage}, iters={self.cfg.total_iters}, images={len(self.index)})>"


def train(
    model: RCAN,
    index: Sequence[IndexEntry],
    cfg: TrainConfig,
    stage: str = "train",
    base: Optional[Checkpoint] = None,
    out_dir=None,
    device: str = "cpu",
) -> Checkpoint:
    """Train `model` for `cfg.total_iters` steps and return the final checkpoint."""
    return Trainer(model, index, cfg, stage=stage, base=base, out_dir=out_dir, device=device).run()


def large_patch_batch(batch_size: int, patch_size: int = LARGE_PATCH, base_patch: int = BASE_PATCH) -> int:
    """Batch size keeping the per-step pixel count at most that of `base_patch` patches."""
    return max(1, batch_size * base_patch**2 // patch_size**2)


def finetune_large_patch(
    ckpt: Checkpoint,
    index: Sequence[IndexEntry],
    cfg: TrainConfig,
    iters: int = 40_000,
    patch_size: int = LARGE_PATCH,
    batch_size: Optional[int] = None,
    out_dir=None,
    device: str = "cpu",
) -> Checkpoint:
    """Continue `ckpt` with larger patches, a fresh schedule and a fresh optimizer."""
    if iters < 0:
        raise ConfigurationError("finetune_iters", f"must be >= 0, got {iters}")
    if not iters:
        return replace(ckpt, stages=list(ckpt.stages) + [{"stage": "large_patch", "iters": 0}])
    if batch_size is None:
        batch_size = large_patch_batch(cfg.batch_size, patch_size, cfg.patch_size)
    stage_cfg = replace(
        cfg,
        total_iters=iters,
        batch_size=batch_size,
        sampler=replace(cfg.sampler, patch_size=patch_size),
    )
    model = restore_model(ckpt)
    return Trainer(
        model, index, stage_cfg, stage="large_patch", base=ckpt, out_dir=out_dir, device=device
    ).run()


def warm_start_tail(
    ckpt_x2: Checkpoint,
    index: Sequence[IndexEntry],
    target_scale: int,
    cfg: TrainConfig,
    tail_iters: int,
    out_dir=None,
    device: str = "cpu",
) -> Checkpoint:
    """Swap in a fresh tail for `target_scale` and train only the tail.

    Stops at `tail_iters` or earlier once validation PSNR plateaus.
    """
    if ckpt_x2.scale != WARM_SOURCE_SCALE:
        raise ConfigurationError(
            "from", f"warm start needs a x{WARM_SOURCE_SCALE} checkpoint, got x{ckpt_x2.scale}"
        )
    if target_scale not in WARM_TARGET_SCALES:
        raise ConfigurationError("scale", f"{target_scale} not in {WARM_TARGET_SCALES}")
    model = swap_tail(restore_model(ckpt_x2), target_scale, cfg.seed)
    return Trainer(
        model,
        index,
        cfg.with_iters(tail_iters),
        stage="warm_tail",
        trainable=("tail",),
        base=ckpt_x2,
        stop_rule=PlateauCriterion(),
        out_dir=out_dir,
        device=device,
    ).run()


def warm_start(
    ckpt_x2: Checkpoint,
    index: Sequence[IndexEntry],
    target_scale: int,
    cfg: TrainConfig,
    tail_iters: int,
    full_iters: Optional[int] = None,
    base_iters: int = 160_000,
    out_dir=None,
    device: str = "cpu",
) -> Checkpoint:
    """Two-stage warm start from a x2 checkpoint to x3/x4.

    `index` must be scanned at `target_scale`. `full_iters` defaults to half
    of `base_iters`, the budget of the longer-training recipe.
    """
    if full_iters is None:
        full_iters = base_iters // 2
    tail_ckpt = warm_start_tail(ckpt_x2, index, target_scale, cfg, tail_iters, out_dir, device)
    model = restore_model(tail_ckpt)
    return Trainer(
        model,
        index,
        cfg.with_iters(full_iters),
        stage="warm_full",
        base=tail_ckpt,
        out_dir=out_dir,
        device=device,
    ).run()


def finetune_oracle(
    ckpt: Checkpoint,
    benchmark_root,
    cfg: TrainConfig,
    max_iters: Optional[int] = None,
    out_dir=None,
    device: str = "cpu",
) -> Checkpoint:
    """Finetune on a benchmark set, scored on that same set, until PSNR plateaus."""
    index = scan_dataset(benchmark_root, ckpt.scale)
    stage_cfg = cfg if max_iters is None else cfg.with_iters(max_iters)
    if not stage_cfg.eval_every:
        stage_cfg = replace(stage_cfg, eval_every=max(1, stage_cfg.total_iters // 20))
    model = restore_model(ckpt)
    return Trainer(
        model,
        index,
        stage_cfg,
        stage="oracle",
        val_index=index,
        base=ckpt,
        stop_rule=PlateauCriterion(),
        out_dir=out_dir,
        device=device,
    ).run()


def train_pipeline(
    model: RCAN,
    index: Sequence[IndexEntry],
    cfg: TrainConfig,
    finetune_iters: int = 0,
    finetune_patch: int = LARGE_PATCH,
    finetune_batch: Optional[int] = None,
    out_dir=None,
    device: str = "cpu",
) -> Checkpoint:
    """Base training followed, when `finetune_iters` > 0, by large-patch finetuning."""
    ckpt = train(model, index, cfg, out_dir=out_dir, device=device)
    if finetune_iters:
        ckpt = finetune_large_patch(
            ckpt, index, cfg, finetune_iters, finetune_patch, finetune_batch, out_dir, device
        )
    return ckpt

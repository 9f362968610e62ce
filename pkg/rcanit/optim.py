"""Optimizers (Adam, Lamb), learning-rate schedules, the linear batch-size
scaling rule and the numeric precision policy.

The update rules are plain functions over named tensors; `Adam` and `Lamb`
wrap them as `torch.optim.Optimizer` subclasses for the training loop.
"""

import contextlib
import logging
import math
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from fractions import Fraction
from typing import Dict
from typing import Iterable
from typing import Optional
from typing import Tuple
from typing import Union

import torch
from torch.amp import GradScaler
from torch.optim import Optimizer

from rcanit.exceptions import ConfigurationError
from rcanit.exceptions import ScheduleError
from rcanit.exceptions import ShapeError

LOGGER = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "lamb")
SCHEDULES = ("cosine", "multistep")
PRECISIONS = ("fp32", "fp16_mixed")

DEFAULT_BETA2 = {"adam": 0.99, "lamb": 0.999}
DEFAULT_EPS = {"adam": 1e-8, "lamb": 1e-6}

LOSS_SCALE_INIT = 2.0**16
LOSS_SCALE_GROWTH_INTERVAL = 2000

# multistep: halve the rate every 20% of the budget
MULTISTEP_INTERVALS = 5

Tensors = Dict[str, torch.Tensor]


@dataclass(frozen=True)
class OptimizerHyper:
    kind: str = "lamb"
    lr: float = 0.0032
    beta1: float = 0.9
    beta2: Optional[float] = None
    eps: Optional[float] = None
    weight_decay: float = 0.0
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigurationError("optimizer", f"{self.kind!r} not in {OPTIMIZERS}")
        if self.beta2 is None:
            object.__setattr__(self, "beta2", DEFAULT_BETA2[self.kind])
        if self.eps is None:
            object.__setattr__(self, "eps", DEFAULT_EPS[self.kind])
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ConfigurationError("lr", f"must be positive and finite, got {self.lr}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigurationError(name, f"must lie in [0, 1), got {value}")
        if not self.eps > 0:
            raise ConfigurationError("eps", f"must be positive, got {self.eps}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay", f"must be >= 0, got {self.weight_decay}")
        if self.grad_clip is not None:
            raise ConfigurationError("grad_clip", "gradient clipping is not supported")


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "cosine"
    total_iters: int = 80_000
    eta_min: float = 0.0
    warmup_iters: int = 0

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ConfigurationError("schedule", f"{self.kind!r} not in {SCHEDULES}")
        if self.total_iters < 1:
            raise ConfigurationError("total_iters", f"must be >= 1, got {self.total_iters}")
        if self.eta_min < 0:
            raise ConfigurationError("eta_min", f"must be >= 0, got {self.eta_min}")
        if not 0 <= self.warmup_iters < self.total_iters:
            raise ConfigurationError(
                "warmup_iters", f"must lie in [0, total_iters), got {self.warmup_iters}"
            )


@dataclass
class OptimizerState:
    step: int = 0
    exp_avg: Tensors = field(default_factory=dict)
    exp_avg_sq: Tensors = field(default_factory=dict)


def scale_lr(base_lr: float, base_bs: int, new_bs: int) -> float:
    """Linear scaling rule: multiply the rate by new_bs / base_bs (correctly rounded)."""
    if base_bs < 1 or new_bs < 1:
        raise ConfigurationError("batch_size", f"batch sizes must be positive: {base_bs}, {new_bs}")
    return float(Fraction(base_lr) * new_bs / base_bs)


def _check_t(t: int, sched: ScheduleConfig) -> None:
    if not 0 <= t <= sched.total_iters:
        raise ScheduleError(f"iteration {t} outside [0, {sched.total_iters}]")


def cosine_lr(t: int, sched: ScheduleConfig, eta_max: float) -> float:
    """Linear warmup to eta_max, then cosine annealing to eta_min."""
    _check_t(t, sched)
    warmup = sched.warmup_iters
    if t < warmup:
        return eta_max * t / warmup
    progress = (t - warmup) / (sched.total_iters - warmup)
    return sched.eta_min + 0.5 * (eta_max - sched.eta_min) * (1.0 + math.cos(math.pi * progress))


def multistep_lr(t: int, sched: ScheduleConfig, eta0: float) -> float:
    """eta0 halved at every 20% boundary of the budget."""
    _check_t(t, sched)
    return eta0 * 2.0 ** (-((MULTISTEP_INTERVALS * t) // sched.total_iters))


def lr_at(t: int, sched: ScheduleConfig, eta: float) -> float:
    if sched.kind == "multistep":
        return multistep_lr(t, sched, eta)
    return cosine_lr(t, sched, eta)


def _check_shapes(params: Tensors, grads: Tensors, state: OptimizerState) -> None:
    for name, grad in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter '{name}'")
        if grad.shape != params[name].shape:
            raise ShapeError(
                f"'{name}': gradient shape {tuple(grad.shape)} != "
                f"parameter shape {tuple(params[name].shape)}"
            )
        moment = state.exp_avg.get(name)
        if moment is not None and moment.shape != params[name].shape:
            raise ShapeError(f"'{name}': optimizer state shape {tuple(moment.shape)} mismatch")


def _adam_ratio(name, param, grad, state: OptimizerState, hyper: OptimizerHyper) -> torch.Tensor:
    """Bias-corrected m_hat / (sqrt(v_hat) + eps), updating the moments in place."""
    exp_avg = state.exp_avg.setdefault(name, torch.zeros_like(param))
    exp_avg_sq = state.exp_avg_sq.setdefault(name, torch.zeros_like(param))
    exp_avg.mul_(hyper.beta1).add_(grad, alpha=1.0 - hyper.beta1)
    exp_avg_sq.mul_(hyper.beta2).addcmul_(grad, grad, value=1.0 - hyper.beta2)
    m_hat = exp_avg / (1.0 - hyper.beta1**state.step)
    v_hat = exp_avg_sq / (1.0 - hyper.beta2**state.step)
    return m_hat / (v_hat.sqrt() + hyper.eps)


@torch.no_grad()
def adam_step(params: Tensors, grads: Tensors, state: OptimizerState, hyper: OptimizerHyper, lr_t: float):
    _check_shapes(params, grads, state)
    state.step += 1
    for name, grad in grads.items():
        param = params[name]
        if hyper.weight_decay:
            grad = grad + hyper.weight_decay * param
        param.add_(_adam_ratio(name, param, grad, state, hyper), alpha=-lr_t)
    return params, state


def trust_ratio(weight: torch.Tensor, update: torch.Tensor) -> Union[torch.Tensor, float]:
    """||w|| / ||u|| per tensor, 1 when either norm is zero."""
    w_norm = torch.linalg.vector_norm(weight)
    u_norm = torch.linalg.vector_norm(update)
    if w_norm > 0 and u_norm > 0:
        return w_norm / u_norm
    return 1.0


@torch.no_grad()
def lamb_step(
    params: Tensors,
    grads: Tensors,
    state: OptimizerState,
    hyper: OptimizerHyper,
    lr_t: float,
    fixed_trust_ratio: Optional[float] = None,
):
    """Layerwise adaptive step: Adam ratio plus decay, scaled by the per-tensor trust ratio.

    `fixed_trust_ratio` replaces the computed ratio (1.0 recovers the Adam direction).
    """
    _check_shapes(params, grads, state)
    state.step += 1
    for name, grad in grads.items():
        param = params[name]
        update = _adam_ratio(name, param, grad, state, hyper)
        if hyper.weight_decay:
            update = update + hyper.weight_decay * param
        phi = trust_ratio(param, update) if fixed_trust_ratio is None else fixed_trust_ratio
        param.sub_(lr_t * phi * update)
    return params, state


class LayerwiseOptimizer(Optimizer):
    """`torch.optim.Optimizer` driving one of the functional updates above.

    Per-parameter state uses torch's Adam layout (`step`, `exp_avg`,
    `exp_avg_sq`). `names` keeps the parameter names in `state_dict()` index
    order so the moments can be stored under them.
    """

    kind = ""

    def __init__(self, named_params: Iterable[Tuple[str, torch.Tensor]], hyper: OptimizerHyper):
        named = list(named_params)
        if not named:
            raise ConfigurationError("trainable", "no parameters to optimize")
        if hyper.kind != self.kind:
            raise ConfigurationError("optimizer", f"{type(self).__name__} given {hyper.kind!r} settings")
        self.hyper = hyper
        self.names = [name for name, _ in named]
        defaults = dict(
            lr=hyper.lr,
            betas=(hyper.beta1, hyper.beta2),
            eps=hyper.eps,
            weight_decay=hyper.weight_decay,
        )
        super().__init__([param for _, param in named], defaults)

    def update(self, params: Tensors, grads: Tensors, state: OptimizerState, hyper: OptimizerHyper, lr_t: float):
        raise NotImplementedError

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            hyper = replace(
                self.hyper, beta1=beta1, beta2=beta2, eps=group["eps"], weight_decay=group["weight_decay"]
            )
            for name, param in zip(self.names, group["params"]):
                if param.grad is None:
                    continue
                slot = self.state[param]
                state = OptimizerState(step=slot.get("step", 0))
                if "exp_avg" in slot:
                    state.exp_avg[name] = slot["exp_avg"]
                    state.exp_avg_sq[name] = slot["exp_avg_sq"]
                self.update({name: param}, {name: param.grad}, state, hyper, group["lr"])
                slot["step"] = state.step
                slot["exp_avg"] = state.exp_avg[name]
                slot["exp_avg_sq"] = state.exp_avg_sq[name]
        return loss

    @property
    def step_count(self) -> int:
        return max((slot.get("step", 0) for slot in self.state.values()), default=0)

    def named_state(self) -> Tensors:
        """Moment tensors from `state_dict()`, keyed ``<moment>/<parameter name>``."""
        packed = self.state_dict()["state"]
        tensors = {}
        for index, name in enumerate(self.names):
            for key, value in packed.get(index, {}).items():
                if torch.is_tensor(value):
                    tensors[f"{key}/{name}"] = value.detach().cpu().clone()
        return tensors


class Adam(LayerwiseOptimizer):
    kind = "adam"

    def update(self, params, grads, state, hyper, lr_t):
        adam_step(params, grads, state, hyper, lr_t)


class Lamb(LayerwiseOptimizer):
    kind = "lamb"

    def update(self, params, grads, state, hyper, lr_t):
        lamb_step(params, grads, state, hyper, lr_t)


OPTIMIZER_CLASSES = {"adam": Adam, "lamb": Lamb}


def build_optimizer(named_params: Iterable[Tuple[str, torch.Tensor]], hyper: OptimizerHyper) -> LayerwiseOptimizer:
    return OPTIMIZER_CLASSES[hyper.kind](named_params, hyper)


class PrecisionContext:
    """Wraps forward/backward/step of one training iteration for a precision mode.

    fp16_mixed keeps 32-bit master parameters, runs the forward pass under
    autocast (float16 on CUDA, bfloat16 on CPU) and scales the loss with a
    `GradScaler`: x2 after 2000 clean steps, x0.5 and a skipped step on overflow.
    fp32 keeps the scaler disabled, which makes it a pass-through.
    """

    def __init__(self, mode: str = "fp32", device_type: str = "cpu"):
        if mode not in PRECISIONS:
            raise ConfigurationError("precision", f"{mode!r} not in {PRECISIONS}")
        self.mode = mode
        self.device_type = device_type
        self.scaler = GradScaler(
            device_type,
            init_scale=LOSS_SCALE_INIT,
            growth_factor=2.0,
            backoff_factor=0.5,
            growth_interval=LOSS_SCALE_GROWTH_INTERVAL,
            enabled=self.mixed,
        )

    @property
    def mixed(self) -> bool:
        return self.mode == "fp16_mixed"

    def autocast(self):
        if not self.mixed:
            return contextlib.nullcontext()
        dtype = torch.float16 if self.device_type == "cuda" else torch.bfloat16
        return torch.autocast(device_type=self.device_type, dtype=dtype)

    def backward(self, loss: torch.Tensor) -> None:
        self.scaler.scale(loss).backward()

    def step(self, optimizer: Optimizer, lr_t: float) -> bool:
        """Apply the optimizer step at rate `lr_t`; False when the step was skipped."""
        for group in optimizer.param_groups:
            group["lr"] = lr_t
        scale = self.scaler.get_scale()
        self.scaler.step(optimizer)
        self.scaler.update()
        optimizer.zero_grad(set_to_none=True)
        stepped = self.scaler.get_scale() >= scale
        if not stepped:
            LOGGER.warning(f"gradient overflow, step skipped; loss scale -> {self.scaler.get_scale()}")
        return stepped

    def state_dict(self) -> dict:
        return {"mode": self.mode, **self.scaler.state_dict()}

    def __repr__(self):
        return f"<PrecisionContext(mode={self.mode}, device={self.device_type})>"


def apply_precision_policy(mode: str, device_type: str = "cpu") -> PrecisionContext:
    return PrecisionContext(mode, device_type)


def hyper_to_dict(hyper: Union[OptimizerHyper, ScheduleConfig]) -> dict:
    return asdict(hyper)

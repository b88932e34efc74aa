"""Rectified-flow objective, staged training, and the Euler ODE sampler.

Training regresses the model's velocity onto the constant displacement
``x1 - x0`` along the straight path ``x_t = (1 - t) x0 + t x1`` with t drawn
uniformly. Three stages exist at toy scale: BASE trains the backbone itself
(standing in for a pretrained base model), CONDITION_LORA trains exactly one
condition adapter on single-conditional data with the base frozen, and
DENOISING_LORA trains only the denoising adapter on multi-conditional data
with every condition adapter frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigurationError, ContractError, NumericError
from .lora import AdapterCallLog, ConditionType, LoraRegistry
from .tensor import Tensor, no_grad

MODE_TRAINING_FREE = "training-free"
MODE_TRAINING_BASED = "training-based"


class TrainStage(Enum):
    BASE = "base"
    CONDITION_LORA = "condition-lora"
    DENOISING_LORA = "denoising-lora"


@dataclass
class TrainExample:
    """One sample as the trainer consumes it: everything in [-1, 1]."""

    x1: np.ndarray  # (H, W, 3)
    caption_ids: np.ndarray
    cond_inputs: dict[ConditionType, np.ndarray]  # type -> (H, W, 3)


@dataclass
class FlowBatch:
    x1: list[np.ndarray]
    x0: list[np.ndarray]
    t: list[float]
    captions: list[np.ndarray]
    conditions: list[list[tuple[ConditionType, np.ndarray]]]

    def __post_init__(self):
        for a, b, tv in zip(self.x0, self.x1, self.t):
            if a.shape != b.shape:
                raise ContractError(f"x0/x1 shape mismatch: {a.shape} vs {b.shape}")
            if not (0.0 <= tv <= 1.0):
                raise ContractError(f"t={tv} outside [0, 1]")


@dataclass
class TrainPlan:
    stage: TrainStage
    steps: int = 200
    batch_size: int = 4
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    log_every: int = 10
    # "constant" or "cosine" (decay to 10% of the base rate by the last step)
    lr_schedule: str = "constant"
    # condition adapter being trained (CONDITION_LORA stage)
    cond_type: ConditionType | None = None
    # condition types fed during DENOISING_LORA training
    condition_types: tuple[ConditionType, ...] = ()
    # ablation: train the text adapter instead of the denoising adapter
    train_text_adapter: bool = False

    def __post_init__(self):
        if self.stage == TrainStage.CONDITION_LORA and self.cond_type is None:
            raise ConfigurationError("CONDITION_LORA stage needs cond_type")
        if self.stage == TrainStage.DENOISING_LORA and not self.condition_types:
            raise ConfigurationError("DENOISING_LORA stage needs condition_types")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant" or self.steps <= 1:
            return self.learning_rate
        frac = min(step / (self.steps - 1), 1.0)
        return self.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + np.cos(np.pi * frac)))


def interpolate(x0: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    """Straight-path point (1 - t) x0 + t x1."""
    if x0.shape != x1.shape:
        raise ContractError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    if not (0.0 <= t <= 1.0):
        raise ContractError(f"t={t} outside [0, 1]")
    return (1.0 - t) * x0 + t * x1


def rf_loss(
    model,
    batch: FlowBatch,
    registry: LoraRegistry | None = None,
    use_denoise_adapter: bool = False,
    call_log: AdapterCallLog | None = None,
) -> Tensor:
    """Mean over the batch of per-sample mean squared velocity error."""
    total = None
    for x1, x0, t, cap, conds in zip(batch.x1, batch.x0, batch.t, batch.captions, batch.conditions):
        x_t = interpolate(x0, x1, t)
        v = model.forward(
            x_t, t, cap, conds, registry=registry,
            use_denoise_adapter=use_denoise_adapter, call_log=call_log,
        )
        diff = v - Tensor(x1 - x0)
        sample_loss = (diff * diff).mean()
        total = sample_loss if total is None else total + sample_loss
    if total is None:
        raise ContractError("empty batch")
    loss = total * (1.0 / len(batch.x1))
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite rectified-flow loss")
    return loss


class Adam:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.b1 ** self.step_count
        bc2 = 1.0 - self.b2 ** self.step_count
        for k, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * t.data
            t.data = t.data - self.lr * update

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"{k}/m"] = self.m[k].copy()
            out[f"{k}/v"] = self.v[k].copy()
        return out

    def load_state(self, state: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.params:
            self.m[k] = state[f"{k}/m"].copy()
            self.v[k] = state[f"{k}/v"].copy()
        self.step_count = step_count


def select_trainable(model, registry: LoraRegistry | None, plan: TrainPlan) -> dict[str, Tensor]:
    """The exact parameter set a stage is allowed to touch."""
    if plan.stage == TrainStage.BASE:
        return model.parameters()
    if registry is None:
        raise ConfigurationError(f"{plan.stage.value} stage requires a registry")
    if plan.stage == TrainStage.CONDITION_LORA:
        adapter = registry.condition_adapters.get(plan.cond_type)
        if adapter is None:
            raise ConfigurationError(f"no {plan.cond_type.name} adapter in registry")
        return {f"cond_lora/{plan.cond_type.name}/{k}": t
                for k, t in adapter.parameters().items()}
    if plan.train_text_adapter:
        if registry.text_adapter is None:
            raise ConfigurationError("text-adapter training requested but none registered")
        return {f"text_lora/{k}": t for k, t in registry.text_adapter.parameters().items()}
    if registry.denoising_adapter is None:
        raise ConfigurationError("DENOISING_LORA stage requires a denoising adapter")
    return {f"denoise_lora/{k}": t for k, t in registry.denoising_adapter.parameters().items()}


def _stage_conditions(plan: TrainPlan, example: TrainExample):
    if plan.stage == TrainStage.BASE:
        return []
    if plan.stage == TrainStage.CONDITION_LORA:
        wanted = (plan.cond_type,)
    else:
        wanted = plan.condition_types
    conds = []
    for ct in wanted:
        if ct not in example.cond_inputs:
            raise ConfigurationError(f"dataset sample lacks a {ct.name} condition image")
        conds.append((ct, example.cond_inputs[ct]))
    return conds


def train(
    model,
    plan: TrainPlan,
    dataset: list[TrainExample],
    registry: LoraRegistry | None = None,
    optimizer: Adam | None = None,
    start_step: int = 0,
) -> tuple[list[tuple[int, float]], Adam]:
    """Run the plan's stage; returns the loss curve and the optimizer.

    Only the stage's selected parameters move; everything else is
    byte-identical afterwards. Deterministic for a fixed seed.
    """
    if not dataset:
        raise ConfigurationError("empty training dataset")
    trainable = select_trainable(model, registry, plan)
    if plan.stage == TrainStage.DENOISING_LORA and registry is not None:
        for adapter in registry.condition_adapters.values():
            adapter.set_frozen(True)
    use_denoise = plan.stage == TrainStage.DENOISING_LORA and not plan.train_text_adapter
    opt = optimizer or Adam(trainable, lr=plan.learning_rate, weight_decay=plan.weight_decay)
    rng = np.random.default_rng(plan.seed + 7919 * start_step)
    shape = dataset[0].x1.shape

    curve: list[tuple[int, float]] = []
    for step in range(start_step, plan.steps):
        idx = rng.integers(0, len(dataset), size=plan.batch_size)
        examples = [dataset[i] for i in idx]
        batch = FlowBatch(
            x1=[e.x1 for e in examples],
            x0=[rng.standard_normal(shape) for _ in examples],
            t=[float(rng.uniform()) for _ in examples],
            captions=[e.caption_ids for e in examples],
            conditions=[_stage_conditions(plan, e) for e in examples],
        )
        try:
            loss = rf_loss(model, batch, registry, use_denoise_adapter=use_denoise)
        except NumericError as exc:
            raise NumericError(f"training diverged at step {step}: {exc}") from exc
        opt.zero_grad()
        loss.backward()
        opt.lr = plan.lr_at(step)
        opt.step()
        if step % plan.log_every == 0 or step == plan.steps - 1:
            curve.append((step, loss.item()))
    return curve, opt


def eval_rf_loss(
    model,
    dataset: list[TrainExample],
    condition_types: tuple[ConditionType, ...],
    registry: LoraRegistry | None = None,
    use_denoise_adapter: bool = False,
    seed: int = 0,
) -> float:
    """Mean rectified-flow loss over a held-out set with fixed (x0, t) draws."""
    rng = np.random.default_rng(seed)
    losses = []
    with no_grad():
        for e in dataset:
            batch = FlowBatch(
                x1=[e.x1],
                x0=[rng.standard_normal(e.x1.shape)],
                t=[float(rng.uniform())],
                captions=[e.caption_ids],
                conditions=[[(ct, e.cond_inputs[ct]) for ct in condition_types]],
            )
            losses.append(rf_loss(model, batch, registry, use_denoise_adapter).item())
    return float(np.mean(losses))


def sample_euler(
    model,
    caption_ids,
    conditions: list[tuple[ConditionType, np.ndarray]],
    steps: int = 16,
    seed: int = 0,
    mode: str = MODE_TRAINING_FREE,
    registry: LoraRegistry | None = None,
    call_log: AdapterCallLog | None = None,
    x0: np.ndarray | None = None,
) -> np.ndarray:
    """Integrate the velocity field from noise with fixed-step Euler.

    Returns the final state clamped to [-1, 1]; clamping happens only at the
    end. ``training-based`` requires a denoising adapter; ``training-free``
    never touches one even if present.
    """
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    if mode not in (MODE_TRAINING_FREE, MODE_TRAINING_BASED):
        raise ConfigurationError(f"unknown sampling mode {mode!r}")
    use_denoise = mode == MODE_TRAINING_BASED
    if use_denoise and (registry is None or registry.denoising_adapter is None):
        raise ConfigurationError("training-based sampling requires a denoising adapter")
    cfg = model.config
    shape = (cfg.image_size, cfg.image_size, cfg.in_channels)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape) if x0 is None else x0.copy()
    dt = 1.0 / steps
    with no_grad():
        for k in range(steps):
            v = model.forward(
                x, k * dt, caption_ids, conditions, registry=registry,
                use_denoise_adapter=use_denoise, call_log=call_log,
            )
            x = x + dt * v.data.astype(np.float64)
    return np.clip(x, -1.0, 1.0)

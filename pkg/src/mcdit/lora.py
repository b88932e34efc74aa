"""Low-rank adapters, the per-condition registry, and one-hot switching.

Every conditional branch carries exactly one ConditionType; the registry maps
each type to a single adapter instance (same-type branches share weights).
An adapter holds one (A, B) pair per target projection; B starts at zero so a
fresh adapter is an exact no-op.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, matmul


class ConditionType(Enum):
    CANNY = "canny"
    DEPTH = "depth"
    SUBJECT = "subject"
    MASK_FILL = "mask_fill"
    STYLE = "style"

    @classmethod
    def parse(cls, name: str) -> "ConditionType":
        try:
            return cls[name.strip().upper().replace("-", "_")]
        except KeyError:
            raise ConfigurationError(
                f"unknown condition type {name!r}; expected one of "
                f"{[t.name for t in cls]}"
            ) from None


# Condition images in pixel correspondence with the output share its token
# coordinates; reference-image types are shifted off the denoising grid.
SPATIALLY_ALIGNED = frozenset({ConditionType.CANNY, ConditionType.DEPTH, ConditionType.MASK_FILL})


@dataclass
class ProjectionDelta:
    """One low-rank update: out += scale * x @ A^T @ B^T."""

    a: Tensor  # [rank, in_dim]
    b: Tensor  # [out_dim, rank]
    scale: float


class LoraAdapter:
    """Low-rank deltas for a named set of target projections."""

    def __init__(
        self,
        targets: list[tuple[str, int, int]],
        rank: int = 4,
        alpha: float | None = None,
        rng: np.random.Generator | None = None,
        init_std: float = 0.02,
    ):
        if rank < 1:
            raise ConfigurationError(f"rank must be >= 1, got {rank}")
        self.rank = rank
        self.alpha = float(alpha if alpha is not None else rank)
        self.frozen = False
        rng = rng or np.random.default_rng(0)
        self.weights: dict[str, tuple[Tensor, Tensor]] = {}
        for name, in_dim, out_dim in targets:
            a = Tensor(rng.standard_normal((rank, in_dim)) * init_std, requires_grad=True)
            b = Tensor(np.zeros((out_dim, rank)), requires_grad=True)
            self.weights[name] = (a, b)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self, target: str) -> ProjectionDelta | None:
        pair = self.weights.get(target)
        if pair is None:
            return None
        return ProjectionDelta(pair[0], pair[1], self.scale)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, (a, b) in self.weights.items():
            out[f"{name}/A"] = a
            out[f"{name}/B"] = b
        return out

    def num_params(self) -> int:
        return sum(a.size + b.size for a, b in self.weights.values())

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        for a, b in self.weights.values():
            a.requires_grad = not frozen
            b.requires_grad = not frozen

    def state_bytes(self) -> bytes:
        """Concatenated raw weight bytes, for before/after freeze assertions."""
        chunks = []
        for name in sorted(self.weights):
            a, b = self.weights[name]
            chunks.append(a.data.tobytes())
            chunks.append(b.data.tobytes())
        return b"".join(chunks)


@dataclass
class AdapterCall:
    """One adapter application, for exclusivity audits."""

    block: str
    proj: str
    span: str  # "T", "X", or "C<i>"
    cond_type: ConditionType | None
    adapter_id: int | None


class AdapterCallLog:
    def __init__(self):
        self.calls: list[AdapterCall] = []

    def record(self, block: str, proj: str, span: str, cond_type, adapter) -> None:
        self.calls.append(
            AdapterCall(block, proj, span, cond_type, id(adapter) if adapter else None)
        )

    def adapters_on_span(self, span: str) -> set[int]:
        return {c.adapter_id for c in self.calls if c.span == span and c.adapter_id}

    def spans_of_adapter(self, adapter) -> set[str]:
        return {c.span for c in self.calls if c.adapter_id == id(adapter)}


class LoraRegistry:
    """ConditionType -> adapter map plus the optional trainable adapters."""

    def __init__(self):
        self.condition_adapters: dict[ConditionType, LoraAdapter] = {}
        self.denoising_adapter: LoraAdapter | None = None
        self.text_adapter: LoraAdapter | None = None

    def register(self, cond_type: ConditionType, adapter: LoraAdapter) -> None:
        self.condition_adapters[cond_type] = adapter

    def types(self) -> list[ConditionType]:
        return list(self.condition_adapters)

    def selection_gate(self, cond_type: ConditionType) -> list[int]:
        """One-hot vector over registry entries in registration order."""
        return [1 if t == cond_type else 0 for t in self.condition_adapters]


def switch_select(cond_type: ConditionType, registry: LoraRegistry) -> LoraAdapter:
    """Pick the one adapter registered for this condition type."""
    adapter = registry.condition_adapters.get(cond_type)
    if adapter is None:
        raise ConfigurationError(
            f"no adapter registered for condition type {cond_type.name}; "
            f"available: {[t.name for t in registry.types()]}"
        )
    return adapter


def linear_with_lora(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    delta: ProjectionDelta | None = None,
) -> Tensor:
    """x @ w^T (+ bias) plus the low-rank path when a delta is given."""
    if x.shape[-1] != w.shape[-1]:
        raise DimensionError(f"linear input width {x.shape[-1]} != weight in_dim {w.shape[-1]}")
    out = matmul(x, w.transpose())
    if bias is not None:
        out = out + bias
    if delta is not None:
        if delta.a.shape[-1] != x.shape[-1] or delta.b.shape[0] != w.shape[0]:
            raise DimensionError(
                f"adapter dims {delta.a.shape}x{delta.b.shape} do not fit weight {w.shape}"
            )
        out = out + matmul(matmul(x, delta.a.transpose()), delta.b.transpose()) * delta.scale
    return out


def merge_weights(w: Tensor, delta: ProjectionDelta) -> Tensor:
    """w + scale * B @ A, so a merged forward equals the adapted forward."""
    if delta.b.shape[0] != w.shape[0] or delta.a.shape[1] != w.shape[1]:
        raise DimensionError(
            f"adapter dims {delta.a.shape}x{delta.b.shape} do not fit weight {w.shape}"
        )
    return Tensor(w.data + delta.scale * (delta.b.data @ delta.a.data))

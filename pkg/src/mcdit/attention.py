"""Unified-sequence assembly and branch-scoped joint attention.

The joint sequence is laid out as [text; denoising; cond_1; ...; cond_N].
Text and denoising queries attend over the whole sequence; each conditional
branch's queries attend only over [text; denoising; own block], so condition
blocks never exchange information and the score work grows linearly, not
quadratically, with the number of conditions.

``scoped_attention`` is the production path (1 + N separate attentions; no
total-by-total score matrix is ever built when N >= 1). ``masked_attention``
is the dense reference implementation used as a test oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, concat, matmul, softmax_scaled

MODE_MMDIT = "mmdit"
MODE_CMMDIT = "cmmdit"


@dataclass(frozen=True)
class BranchLayout:
    """Token counts of the text, denoising, and conditional branches."""

    len_t: int
    len_x: int
    len_c: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "len_c", tuple(int(c) for c in self.len_c))
        if self.len_t < 1 or self.len_x < 1 or any(c < 1 for c in self.len_c):
            raise DimensionError(f"branch lengths must be >= 1, got {self}")

    @property
    def num_conditions(self) -> int:
        return len(self.len_c)

    @property
    def total(self) -> int:
        return self.len_t + self.len_x + sum(self.len_c)

    @property
    def tx_end(self) -> int:
        return self.len_t + self.len_x

    def text_span(self) -> tuple[int, int]:
        return (0, self.len_t)

    def denoise_span(self) -> tuple[int, int]:
        return (self.len_t, self.tx_end)

    def cond_span(self, i: int) -> tuple[int, int]:
        lo = self.tx_end + sum(self.len_c[:i])
        return (lo, lo + self.len_c[i])

    def offsets(self) -> list[int]:
        """Start offset of every branch block in layout order."""
        out = [0, self.len_t]
        pos = self.tx_end
        for c in self.len_c:
            out.append(pos)
            pos += c
        return out


@dataclass
class UnifiedSequence:
    """Concatenated branch tokens plus the layout describing their spans."""

    tokens: Tensor
    layout: BranchLayout

    def text(self) -> Tensor:
        lo, hi = self.layout.text_span()
        return self.tokens[lo:hi, :]

    def denoise(self) -> Tensor:
        lo, hi = self.layout.denoise_span()
        return self.tokens[lo:hi, :]

    def cond(self, i: int) -> Tensor:
        lo, hi = self.layout.cond_span(i)
        return self.tokens[lo:hi, :]


@dataclass
class AttentionInputs:
    """Per-head query/key/value blocks laid out in sequence order."""

    q: Tensor
    k: Tensor
    v: Tensor
    head_dim: int

    def __post_init__(self):
        if not (self.q.shape == self.k.shape == self.v.shape):
            raise DimensionError(
                f"q/k/v shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}"
            )
        if self.q.ndim != 3 or self.q.shape[-1] != self.head_dim:
            raise DimensionError(
                f"expected [heads, tokens, {self.head_dim}], got {self.q.shape}"
            )


class AttentionRecorder:
    """Captures softmax rows and score-matrix shapes for diagnostics."""

    def __init__(self):
        self.score_shapes: list[tuple] = []
        self.traces: list[dict] = []

    def record_scores(self, shape: tuple) -> None:
        self.score_shapes.append(tuple(shape))

    def record_tx_probs(self, label: str, layout: BranchLayout, probs: np.ndarray) -> None:
        self.traces.append({"label": label, "layout": layout, "tx_probs": probs.copy()})


def assemble_sequence(
    t_tokens: Tensor, x_tokens: Tensor, cond_tokens: list[Tensor]
) -> tuple[UnifiedSequence, BranchLayout]:
    """Concatenate branch blocks in [T; X; C_1; ...; C_N] order."""
    widths = {t_tokens.shape[-1], x_tokens.shape[-1], *(c.shape[-1] for c in cond_tokens)}
    if len(widths) != 1:
        raise DimensionError(f"branch embedding widths differ: {sorted(widths)}")
    layout = BranchLayout(t_tokens.shape[0], x_tokens.shape[0], tuple(c.shape[0] for c in cond_tokens))
    tokens = concat([t_tokens, x_tokens, *cond_tokens], axis=0)
    return UnifiedSequence(tokens, layout), layout


def scope_mask(layout: BranchLayout) -> np.ndarray:
    """Boolean [total, total] allowed-key matrix for the scoped attention.

    Text and denoising rows see everything; each conditional row sees only
    text, denoising, and its own block. Not symmetric once N >= 2.
    """
    n = layout.total
    mask = np.zeros((n, n), dtype=bool)
    mask[: layout.tx_end, :] = True
    for i in range(layout.num_conditions):
        lo, hi = layout.cond_span(i)
        mask[lo:hi, : layout.tx_end] = True
        mask[lo:hi, lo:hi] = True
    return mask


def scoped_attention(
    inputs: AttentionInputs,
    layout: BranchLayout,
    recorder: AttentionRecorder | None = None,
    label: str = "",
) -> Tensor:
    """Block-decomposed joint attention (1 + N separate softmax-attentions).

    Output rows come back in layout order. Equivalent to
    ``masked_attention(inputs, scope_mask(layout))`` but never builds a
    total-by-total score matrix when conditions are present.
    """
    if inputs.q.shape[1] != layout.total:
        raise DimensionError(
            f"inputs have {inputs.q.shape[1]} tokens, layout expects {layout.total}"
        )
    scale = 1.0 / math.sqrt(inputs.head_dim)
    q, k, v = inputs.q, inputs.k, inputs.v
    tx = layout.tx_end

    kt = k.transpose(0, 2, 1)
    probs_tx = softmax_scaled(matmul(q[:, :tx, :], kt), scale)
    if recorder is not None:
        recorder.record_scores(probs_tx.shape)
        recorder.record_tx_probs(label, layout, probs_tx.data)
    out_blocks = [matmul(probs_tx, v)]

    for i in range(layout.num_conditions):
        lo, hi = layout.cond_span(i)
        ki = concat([k[:, :tx, :], k[:, lo:hi, :]], axis=1)
        vi = concat([v[:, :tx, :], v[:, lo:hi, :]], axis=1)
        probs_i = softmax_scaled(matmul(q[:, lo:hi, :], ki.transpose(0, 2, 1)), scale)
        if recorder is not None:
            recorder.record_scores(probs_i.shape)
        out_blocks.append(matmul(probs_i, vi))

    return out_blocks[0] if len(out_blocks) == 1 else concat(out_blocks, axis=1)


def masked_attention(inputs: AttentionInputs, mask: np.ndarray) -> Tensor:
    """Dense attention with disallowed scores pushed to a -1e9 sentinel.

    Reference oracle for ``scoped_attention``; materializes the full score
    matrix. Every row must allow at least one key.
    """
    n = inputs.q.shape[1]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n, n):
        raise DimensionError(f"mask shape {mask.shape} does not match {n} tokens")
    if not mask.any(axis=1).all():
        bad = int(np.flatnonzero(~mask.any(axis=1))[0])
        raise ContractError(f"attention row {bad} has no allowed keys")
    scale = 1.0 / math.sqrt(inputs.head_dim)
    scores = matmul(inputs.q, inputs.k.transpose(0, 2, 1))
    keep = Tensor(mask.astype(scores.data.dtype))
    penalty = Tensor((~mask).astype(scores.data.dtype) * -1e9)
    probs = softmax_scaled(scores * keep + penalty, scale)
    return matmul(probs, inputs.v)


def count_attn_ops(layout: BranchLayout, num_blocks: int, mode: str) -> int:
    """Query-key score pairs over all transformer blocks (head count excluded).

    Full joint attention costs total(S)^2 per block; the scoped variant costs
    (len_T + len_X) * total(S) plus, per condition, len_C_i * (len_T + len_X
    + len_C_i). Exact integers.
    """
    if num_blocks < 1:
        raise ContractError(f"num_blocks must be >= 1, got {num_blocks}")
    total = layout.total
    if mode == MODE_MMDIT:
        per_block = total * total
    elif mode == MODE_CMMDIT:
        per_block = layout.tx_end * total + sum(
            c * (layout.tx_end + c) for c in layout.len_c
        )
    else:
        raise ContractError(f"unknown mode {mode!r}; expected mmdit or cmmdit")
    return per_block * num_blocks


# Reference layout behind the full-scale op-count comparison: 512 text tokens,
# 1024 denoising tokens, two 1024-token conditions, 57 blocks.
FULL_SCALE_2COND = BranchLayout(512, 1024, (1024, 1024))
FULL_SCALE_NUM_BLOCKS = 57

PRESETS = {"full-scale-2cond": (FULL_SCALE_2COND, FULL_SCALE_NUM_BLOCKS)}

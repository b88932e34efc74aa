"""Toy two-stream diffusion-transformer denoiser over pixel patches.

Dual-stream blocks keep separate projection weights for the text stream and
the image stream; the denoising block and every conditional block share the
image-stream ("denoising branch") weights byte-for-byte and differ only by
which low-rank adapter is switched in. Single-stream blocks apply one shared
projection set over the whole joint sequence. Attention is the branch-scoped
joint attention throughout, with 2D rotary phases on the head channels.

The network predicts the per-pixel velocity that carries noise to data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionInputs, AttentionRecorder, BranchLayout, scoped_attention
from .errors import ConfigurationError, ContractError, DimensionError
from .lora import (
    SPATIALLY_ALIGNED,
    AdapterCallLog,
    ConditionType,
    LoraAdapter,
    LoraRegistry,
    linear_with_lora,
    switch_select,
)
from .tensor import Tensor, concat, embedding, layer_norm, matmul, silu


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    head_dim: int = 32
    num_heads: int = 2
    num_dual_blocks: int = 2
    num_single_blocks: int = 2
    patch_size: int = 2
    image_size: int = 32
    in_channels: int = 3
    vocab_size: int = 32
    max_text_len: int = 8
    rope_base: float = 10000.0
    mlp_ratio: float = 4.0
    # where Condition/Denoising-LoRA targets live: "dsb+ssb" or "dsb"
    lora_placement: str = "dsb+ssb"
    # shift subject/style condition tokens off the denoising grid
    offset_nonaligned_conditions: bool = True

    def __post_init__(self):
        if self.embed_dim != self.num_heads * self.head_dim:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} != num_heads {self.num_heads} x head_dim {self.head_dim}"
            )
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.head_dim % 4 != 0:
            raise ConfigurationError(f"head_dim must be divisible by 4, got {self.head_dim}")
        if self.num_dual_blocks < 1 or self.num_single_blocks < 0:
            raise ConfigurationError("need >= 1 dual block and >= 0 single blocks")
        if self.lora_placement not in ("dsb+ssb", "dsb"):
            raise ConfigurationError(f"bad lora_placement {self.lora_placement!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_image_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "head_dim": self.head_dim,
            "num_heads": self.num_heads,
            "num_dual_blocks": self.num_dual_blocks,
            "num_single_blocks": self.num_single_blocks,
            "patch_size": self.patch_size,
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "vocab_size": self.vocab_size,
            "max_text_len": self.max_text_len,
            "rope_base": self.rope_base,
            "mlp_ratio": self.mlp_ratio,
            "lora_placement": self.lora_placement,
            "offset_nonaligned_conditions": self.offset_nonaligned_conditions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class PositionAssignment:
    """2D rotary coordinates for every token in layout order."""

    coords: np.ndarray  # [total, 2] (row, col)
    cond_offsets: list[tuple[int, int]]


def assign_positions(
    config: ModelConfig, len_t: int, cond_types: list[ConditionType]
) -> PositionAssignment:
    g = config.grid
    rows, cols = np.divmod(np.arange(g * g), g)
    grid_coords = np.stack([rows, cols], axis=1).astype(np.float64)
    text_coords = np.stack([np.zeros(len_t), np.arange(len_t)], axis=1)
    parts = [text_coords, grid_coords]
    offsets: list[tuple[int, int]] = []
    for ct in cond_types:
        if ct in SPATIALLY_ALIGNED or not config.offset_nonaligned_conditions:
            off = (0, 0)
        else:
            off = (0, g)
        offsets.append(off)
        parts.append(grid_coords + np.array(off, dtype=np.float64))
    return PositionAssignment(np.concatenate(parts, axis=0), offsets)


def rope_tables(coords: np.ndarray, head_dim: int, base: float):
    """Per-token cos/sin phases; half the head dims rotate by the row
    coordinate, the other half by the column coordinate."""
    pairs = head_dim // 4
    inv = base ** (-np.arange(pairs) / pairs)
    ang_r = coords[:, 0:1] * inv[None, :]
    ang_c = coords[:, 1:2] * inv[None, :]
    return (
        Tensor(np.cos(ang_r)), Tensor(np.sin(ang_r)),
        Tensor(np.cos(ang_c)), Tensor(np.sin(ang_c)),
    )


def _rotate_group(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    h = x.shape[-1] // 2
    a, b = x[..., :h], x[..., h:]
    return concat([a * cos - b * sin, a * sin + b * cos], axis=-1)


def apply_rope(x: Tensor, tables) -> Tensor:
    """Rotate head channels of [heads, tokens, head_dim] by the 2D phases."""
    cos_r, sin_r, cos_c, sin_c = tables
    half = x.shape[-1] // 2
    return concat(
        [_rotate_group(x[..., :half], cos_r, sin_r),
         _rotate_group(x[..., half:], cos_c, sin_c)],
        axis=-1,
    )


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    h, w, c = img.shape
    g = h // patch
    x = img.reshape(g, patch, g, patch, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(g * g, patch * patch * c)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (scale + 1.0) + shift


@dataclass
class Modulation:
    shift1: Tensor
    scale1: Tensor
    gate1: Tensor
    shift2: Tensor
    scale2: Tensor
    gate2: Tensor


def lora_target_specs(config: ModelConfig) -> list[tuple[str, int, int]]:
    """Denoising-branch attention projections eligible for low-rank deltas."""
    d = config.embed_dim
    specs = []
    for i in range(config.num_dual_blocks):
        for proj in ("q", "k", "v", "o"):
            specs.append((f"dsb{i}/img_{proj}", d, d))
    if config.lora_placement == "dsb+ssb":
        for j in range(config.num_single_blocks):
            for proj in ("q", "k", "v", "o"):
                specs.append((f"ssb{j}/{proj}", d, d))
    return specs


def text_lora_target_specs(config: ModelConfig) -> list[tuple[str, int, int]]:
    """Text-branch counterpart used only by the trainable-LoRA ablation."""
    d = config.embed_dim
    specs = []
    for i in range(config.num_dual_blocks):
        for proj in ("q", "k", "v", "o"):
            specs.append((f"dsb{i}/txt_{proj}", d, d))
    if config.lora_placement == "dsb+ssb":
        for j in range(config.num_single_blocks):
            for proj in ("q", "k", "v", "o"):
                specs.append((f"ssb{j}/{proj}", d, d))
    return specs


def make_adapter(
    config: ModelConfig, rank: int = 4, alpha: float | None = None,
    rng: np.random.Generator | None = None, text_branch: bool = False,
) -> LoraAdapter:
    specs = text_lora_target_specs(config) if text_branch else lora_target_specs(config)
    return LoraAdapter(specs, rank=rank, alpha=alpha, rng=rng)


class Model:
    """The denoiser: branch embedders, dual- and single-stream blocks, head."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng or np.random.default_rng(0)
        d = config.embed_dim
        hidden = int(d * config.mlp_ratio)
        p: dict[str, Tensor] = {}

        def lin(name, out_dim, in_dim, std=0.02, zero=False):
            w = np.zeros((out_dim, in_dim)) if zero else rng.standard_normal((out_dim, in_dim)) * std
            p[f"{name}/w"] = Tensor(w, requires_grad=True)
            p[f"{name}/b"] = Tensor(np.zeros(out_dim), requires_grad=True)

        p["embed/vocab"] = Tensor(rng.standard_normal((config.vocab_size, d)) * 0.02,
                                  requires_grad=True)
        lin("embed/patch", d, config.patch_dim)
        lin("time/fc1", d, d)
        lin("time/fc2", d, d)
        for i in range(config.num_dual_blocks):
            for stream in ("txt", "img"):
                for proj in ("q", "k", "v", "o"):
                    lin(f"dsb{i}/{stream}_{proj}", d, d)
                lin(f"dsb{i}/{stream}_mod", 6 * d, d, zero=True)
                lin(f"dsb{i}/{stream}_mlp1", hidden, d)
                lin(f"dsb{i}/{stream}_mlp2", d, hidden)
        for j in range(config.num_single_blocks):
            for proj in ("q", "k", "v", "o"):
                lin(f"ssb{j}/{proj}", d, d)
            lin(f"ssb{j}/mod", 6 * d, d, zero=True)
            lin(f"ssb{j}/mlp1", hidden, d)
            lin(f"ssb{j}/mlp2", d, hidden)
        lin("final/mod", 2 * d, d, zero=True)
        lin("final/head", config.patch_dim, d, zero=True)
        self.params = p

    # -- parameter access ----------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigurationError(
                f"state mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}"
            )
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise DimensionError(f"param {k}: shape {state[k].shape} != {t.shape}")
            t.data = np.asarray(state[k], dtype=t.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    # -- embedding -----------------------------------------------------------

    def embed_branches(
        self,
        x_img: np.ndarray,
        caption_ids,
        conditions: list[tuple[ConditionType, np.ndarray]],
    ) -> tuple[Tensor, Tensor, list[Tensor]]:
        cfg = self.config
        caption_ids = np.asarray(caption_ids, dtype=np.int64)
        if caption_ids.ndim != 1 or caption_ids.size < 1:
            raise DimensionError("caption must be a non-empty 1-D id sequence")
        if caption_ids.size > cfg.max_text_len:
            raise DimensionError(
                f"caption length {caption_ids.size} exceeds max_text_len {cfg.max_text_len}"
            )
        expected = (cfg.image_size, cfg.image_size, cfg.in_channels)
        if x_img.shape != expected:
            raise DimensionError(f"image shape {x_img.shape} != {expected}")
        t_tok = embedding(self.params["embed/vocab"], caption_ids)
        pw, pb = self.params["embed/patch/w"], self.params["embed/patch/b"]
        x_tok = linear_with_lora(Tensor(patchify(x_img, cfg.patch_size)), pw, pb)
        c_toks = []
        for ct, img in conditions:
            if img.shape != expected:
                raise DimensionError(f"{ct.name} condition shape {img.shape} != {expected}")
            c_toks.append(linear_with_lora(Tensor(patchify(img, cfg.patch_size)), pw, pb))
        return t_tok, x_tok, c_toks

    def timestep_embed(self, t: float) -> Tensor:
        if not (0.0 <= t <= 1.0):
            raise ContractError(f"timestep {t} outside [0, 1]")
        d = self.config.embed_dim
        half = d // 2
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
        ang = t * 1000.0 * freqs
        feat = Tensor(np.concatenate([np.sin(ang), np.cos(ang)])[None, :])
        p = self.params
        h = silu(linear_with_lora(feat, p["time/fc1/w"], p["time/fc1/b"]))
        return linear_with_lora(h, p["time/fc2/w"], p["time/fc2/b"])

    def _modulation(self, name: str, tvec: Tensor) -> Modulation:
        p = self.params
        m = linear_with_lora(silu(tvec), p[f"{name}/w"], p[f"{name}/b"])
        d = self.config.embed_dim
        return Modulation(*(m[:, k * d:(k + 1) * d] for k in range(6)))

    # -- blocks ----------------------------------------------------------------

    def _mlp(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        h = silu(linear_with_lora(x, p[f"{prefix}1/w"], p[f"{prefix}1/b"]))
        return linear_with_lora(h, p[f"{prefix}2/w"], p[f"{prefix}2/b"])

    def _heads(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        cfg = self.config
        return x.reshape(n, cfg.num_heads, cfg.head_dim).transpose(1, 0, 2)

    def _unheads(self, x: Tensor) -> Tensor:
        h, n, hd = x.shape
        return x.transpose(1, 0, 2).reshape(n, h * hd)

    def _branch_adapters(self, block: str, spans, registry, use_denoise, call_log):
        """Resolve the adapter for each (span_name, cond_type) in sequence order."""
        out = []
        for span_name, ctype in spans:
            adapter = None
            if registry is not None:
                if span_name == "X" and use_denoise and registry.denoising_adapter:
                    adapter = registry.denoising_adapter
                elif span_name == "T" and registry.text_adapter:
                    adapter = registry.text_adapter
                elif span_name.startswith("C"):
                    adapter = switch_select(ctype, registry)
            out.append(adapter)
        return out

    def _proj_span(self, block, proj_key, x, span_name, ctype, adapter, call_log):
        p = self.params
        delta = adapter.delta(f"{block}/{proj_key}") if adapter is not None else None
        if call_log is not None and delta is not None:
            call_log.record(block, proj_key, span_name, ctype, adapter)
        return linear_with_lora(x, p[f"{block}/{proj_key}/w"], p[f"{block}/{proj_key}/b"], delta)

    def _dual_block(self, i, t_tok, x_tok, c_toks, cond_types, tvec, rope,
                    registry, use_denoise, call_log, recorder):
        cfg = self.config
        blk = f"dsb{i}"
        tmod = self._modulation(f"{blk}/txt_mod", tvec)
        imod = self._modulation(f"{blk}/img_mod", tvec)

        spans = [("T", None), ("X", None)] + [(f"C{k}", ct) for k, ct in enumerate(cond_types)]
        adapters = self._branch_adapters(blk, spans, registry, use_denoise, call_log)
        mods = [tmod] + [imod] * (1 + len(c_toks))
        streams = ["txt", "img"] + ["img"] * len(c_toks)
        blocks = [t_tok, x_tok, *c_toks]

        normed = [modulate(layer_norm(b), m.shift1, m.scale1) for b, m in zip(blocks, mods)]
        qs, ks, vs = [], [], []
        for x, (span, ctype), adapter, stream in zip(normed, spans, adapters, streams):
            qs.append(self._proj_span(blk, f"{stream}_q", x, span, ctype, adapter, call_log))
            ks.append(self._proj_span(blk, f"{stream}_k", x, span, ctype, adapter, call_log))
            vs.append(self._proj_span(blk, f"{stream}_v", x, span, ctype, adapter, call_log))

        layout = BranchLayout(t_tok.shape[0], x_tok.shape[0], tuple(c.shape[0] for c in c_toks))
        q = apply_rope(self._heads(concat(qs, axis=0)), rope)
        k = apply_rope(self._heads(concat(ks, axis=0)), rope)
        v = self._heads(concat(vs, axis=0))
        attn = scoped_attention(AttentionInputs(q, k, v, cfg.head_dim), layout,
                                recorder=recorder, label=blk)
        attn = self._unheads(attn)

        outs = []
        offs = layout.offsets() + [layout.total]
        for idx, ((span, ctype), adapter, stream, m) in enumerate(zip(spans, adapters, streams, mods)):
            rows = attn[offs[idx]:offs[idx + 1], :]
            o = self._proj_span(blk, f"{stream}_o", rows, span, ctype, adapter, call_log)
            outs.append(blocks[idx] + m.gate1 * o)

        final = []
        for b, m, stream in zip(outs, mods, streams):
            h = modulate(layer_norm(b), m.shift2, m.scale2)
            final.append(b + m.gate2 * self._mlp(f"{blk}/{stream}_mlp", h))
        return final[0], final[1], final[2:]

    def _single_block(self, j, seq, layout, cond_types, tvec, rope,
                      registry, use_denoise, call_log, recorder):
        cfg = self.config
        blk = f"ssb{j}"
        mod = self._modulation(f"{blk}/mod", tvec)
        spans = [("T", None), ("X", None)] + [(f"C{k}", ct) for k, ct in enumerate(cond_types)]
        lora_here = cfg.lora_placement == "dsb+ssb"
        adapters = (
            self._branch_adapters(blk, spans, registry, use_denoise, call_log)
            if lora_here else [None] * len(spans)
        )
        offs = layout.offsets() + [layout.total]

        s_n = modulate(layer_norm(seq), mod.shift1, mod.scale1)
        qs, ks, vs = [], [], []
        for idx, ((span, ctype), adapter) in enumerate(zip(spans, adapters)):
            rows = s_n[offs[idx]:offs[idx + 1], :]
            qs.append(self._proj_span(blk, "q", rows, span, ctype, adapter, call_log))
            ks.append(self._proj_span(blk, "k", rows, span, ctype, adapter, call_log))
            vs.append(self._proj_span(blk, "v", rows, span, ctype, adapter, call_log))
        q = apply_rope(self._heads(concat(qs, axis=0)), rope)
        k = apply_rope(self._heads(concat(ks, axis=0)), rope)
        v = self._heads(concat(vs, axis=0))
        attn = self._unheads(
            scoped_attention(AttentionInputs(q, k, v, cfg.head_dim), layout,
                             recorder=recorder, label=blk)
        )
        outs = []
        for idx, ((span, ctype), adapter) in enumerate(zip(spans, adapters)):
            rows = attn[offs[idx]:offs[idx + 1], :]
            outs.append(self._proj_span(blk, "o", rows, span, ctype, adapter, call_log))
        seq = seq + mod.gate1 * concat(outs, axis=0)
        h = modulate(layer_norm(seq), mod.shift2, mod.scale2)
        return seq + mod.gate2 * self._mlp(f"{blk}/mlp", h)

    # -- forward ---------------------------------------------------------------

    def forward(
        self,
        x_img: np.ndarray,
        t: float,
        caption_ids,
        conditions: list[tuple[ConditionType, np.ndarray]] | None = None,
        registry: LoraRegistry | None = None,
        use_denoise_adapter: bool = False,
        call_log: AdapterCallLog | None = None,
        recorder: AttentionRecorder | None = None,
    ) -> Tensor:
        """Predict the velocity field for one sample; output has image shape."""
        cfg = self.config
        conditions = conditions or []
        cond_types = [ct for ct, _ in conditions]
        t_tok, x_tok, c_toks = self.embed_branches(x_img, caption_ids, conditions)
        tvec = self.timestep_embed(t)

        positions = assign_positions(cfg, t_tok.shape[0], cond_types)
        rope = rope_tables(positions.coords, cfg.head_dim, cfg.rope_base)

        for i in range(cfg.num_dual_blocks):
            t_tok, x_tok, c_toks = self._dual_block(
                i, t_tok, x_tok, c_toks, cond_types, tvec, rope,
                registry, use_denoise_adapter, call_log, recorder,
            )

        layout = BranchLayout(t_tok.shape[0], x_tok.shape[0], tuple(c.shape[0] for c in c_toks))
        seq = concat([t_tok, x_tok, *c_toks], axis=0)
        for j in range(cfg.num_single_blocks):
            seq = self._single_block(
                j, seq, layout, cond_types, tvec, rope,
                registry, use_denoise_adapter, call_log, recorder,
            )

        lo, hi = layout.denoise_span()
        x_rows = seq[lo:hi, :]
        p = self.params
        fm = linear_with_lora(silu(tvec), p["final/mod/w"], p["final/mod/b"])
        d = cfg.embed_dim
        shift, scale = fm[:, :d], fm[:, d:]
        h = modulate(layer_norm(x_rows), shift, scale)
        out = linear_with_lora(h, p["final/head/w"], p["final/head/b"])
        g, ps, c = cfg.grid, cfg.patch_size, cfg.in_channels
        return (
            out.reshape(g, g, ps, ps, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape(cfg.image_size, cfg.image_size, c)
        )

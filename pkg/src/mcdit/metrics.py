"""Desk-scale evaluation: edge F1, depth MSE, windowed SSIM, and the
denoising-to-branch attention-map diagnostic."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionRecorder
from .errors import ContractError, DimensionError
from .lora import ConditionType, LoraRegistry

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def edge_f1(pred: np.ndarray, gt: np.ndarray) -> float:
    """Pixel-exact F1 between binary edge maps.

    Both empty counts as perfect agreement (1.0); exactly one empty is a
    total miss (0.0).
    """
    if pred.shape != gt.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    np_pred, np_gt = int(p.sum()), int(g.sum())
    if np_pred == 0 and np_gt == 0:
        return 1.0
    if np_pred == 0 or np_gt == 0:
        return 0.0
    tp = int((p & g).sum())
    if tp == 0:
        return 0.0
    precision = tp / np_pred
    recall = tp / np_gt
    return 2.0 * precision * recall / (precision + recall)


def depth_mse(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean squared error over pixels; inputs scaled to [0, 255]."""
    if pred.shape != gt.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    diff = pred.astype(np.float64) - gt.astype(np.float64)
    return float(np.mean(diff * diff))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8, stride: int = 4) -> float:
    """Windowed SSIM with the standard stabilizers, mean over windows/channels.

    Inputs in [0, 1], grayscale (H, W) or multi-channel (H, W, C).
    """
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    h, w, c = a.shape
    if h < window or w < window:
        raise DimensionError(f"image {h}x{w} smaller than {window}x{window} window")
    vals = []
    for ch in range(c):
        for y in range(0, h - window + 1, stride):
            for x in range(0, w - window + 1, stride):
                wa = a[y:y + window, x:x + window, ch].astype(np.float64)
                wb = b[y:y + window, x:x + window, ch].astype(np.float64)
                mu_a, mu_b = wa.mean(), wb.mean()
                var_a, var_b = wa.var(), wb.var()
                cov = ((wa - mu_a) * (wb - mu_b)).mean()
                vals.append(
                    ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2))
                    / ((mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2))
                )
    return float(np.mean(vals))


# -- attention diagnostics -------------------------------------------------------


@dataclass
class AttentionTrace:
    """Denoising-query attention mass onto one branch, per block and head."""

    target: ConditionType
    heat: np.ndarray  # (grid, grid) averaged mass per target token
    slices: list[dict]  # per block: {"label", "T", "X", "C0", ...} prob slices
    blocks: list[str]

    def total_mass(self) -> float:
        return float(self.heat.sum())

    def concentration(self, mask_grid: np.ndarray) -> float:
        """Fraction of the branch-directed mass inside a grid-cell mask."""
        total = self.heat.sum()
        return float(self.heat[mask_grid].sum() / total) if total > 0 else 0.0


def pixel_mask_to_grid(mask: np.ndarray, patch: int) -> np.ndarray:
    """A grid cell counts as masked when any covered pixel is masked."""
    h, w = mask.shape
    g = h // patch
    return mask.reshape(g, patch, g, patch).any(axis=(1, 3))


def xattn_map(
    model,
    x_img: np.ndarray,
    t: float,
    caption_ids,
    conditions,
    target: ConditionType,
    registry: LoraRegistry | None = None,
    use_denoise_adapter: bool = False,
    region_mask: np.ndarray | None = None,
    blocks: list[str] | None = None,
) -> AttentionTrace:
    """Average denoising-query -> target-branch attention map on the grid.

    ``region_mask`` (image pixels) restricts which denoising rows are
    averaged; ``blocks`` selects a subset of block labels (default: all).
    """
    cond_types = [ct for ct, _ in conditions]
    if target not in cond_types:
        raise ContractError(f"target branch {target.name} absent from conditions")
    target_idx = cond_types.index(target)

    recorder = AttentionRecorder()
    model.forward(
        x_img, t, caption_ids, conditions, registry=registry,
        use_denoise_adapter=use_denoise_adapter, recorder=recorder,
    )

    cfg = model.config
    g = cfg.grid
    if region_mask is not None:
        row_sel = pixel_mask_to_grid(region_mask, cfg.patch_size).reshape(-1)
    else:
        row_sel = np.ones(g * g, dtype=bool)

    maps = []
    slices = []
    used = []
    for trace in recorder.traces:
        if blocks is not None and trace["label"] not in blocks:
            continue
        layout = trace["layout"]
        probs = trace["tx_probs"]  # [H, len_t + len_x, total]
        x_lo, x_hi = layout.denoise_span()
        x_rows = probs[:, x_lo:x_hi, :]
        entry = {"label": trace["label"]}
        t_lo, t_hi = layout.text_span()
        entry["T"] = x_rows[:, :, t_lo:t_hi]
        entry["X"] = x_rows[:, :, x_lo:x_hi]
        for i in range(layout.num_conditions):
            lo, hi = layout.cond_span(i)
            entry[f"C{i}"] = x_rows[:, :, lo:hi]
        slices.append(entry)
        used.append(trace["label"])
        sel = x_rows[:, row_sel, :]
        lo, hi = layout.cond_span(target_idx)
        maps.append(sel[:, :, lo:hi].mean(axis=(0, 1)))

    if not maps:
        raise ContractError("no attention traces captured (block filter too strict?)")
    heat = np.mean(maps, axis=0).reshape(g, g)
    return AttentionTrace(target=target, heat=heat, slices=slices, blocks=used)


# -- reports ---------------------------------------------------------------------


@dataclass
class MetricReport:
    per_sample: list[dict]
    config_hash: str
    # slots kept for externally computed scores
    extra: dict = field(default_factory=lambda: {"fid": None, "clip_i": None,
                                                 "dino": None, "clip_t": None})

    @property
    def count(self) -> int:
        return len(self.per_sample)

    def aggregates(self) -> dict:
        keys = [k for k in ("f1", "mse", "ssim") if self.per_sample and k in self.per_sample[0]]
        return {k: float(np.mean([s[k] for s in self.per_sample])) for k in keys}

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "header", "count": self.count,
                             "config_hash": self.config_hash, **self.extra})]
        for s in self.per_sample:
            lines.append(json.dumps({"kind": "sample", **s}))
        lines.append(json.dumps({"kind": "aggregate", **self.aggregates()}))
        return "\n".join(lines) + "\n"

    def summary_table(self) -> str:
        agg = self.aggregates()
        rows = [f"samples: {self.count}"]
        for k, v in agg.items():
            rows.append(f"{k:>6}: {v:.6f}")
        return "\n".join(rows)


def config_hash(config_dict: dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True).encode()
    return hashlib.sha1(blob).hexdigest()[:12]

"""Procedural multi-conditional toy dataset.

Scenes are 1-3 flat shapes (circle / rectangle / triangle) on a dark
background, each on its own depth layer. The palette couples appearance to
depth: a shape's color is its hue re-lit to the luma band of its layer
(0.4 / 0.6 / 0.8), so depth can be read back off any image by quantizing
luma. Every condition image is derived from the same scene graph as the
target, and the caption describes the subject (topmost) shape.

Edge maps are forward-difference luma gradients thresholded at 0.2; together
with the quantized-luma depth reader this keeps generation and evaluation on
one shared pair of operators with no external vision models.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, DimensionError
from .flow import TrainExample
from .lora import ConditionType

IMAGE_SIZE = 32
EDGE_THRESHOLD = 0.2
LAYER_LUMAS = {1: 0.4, 2: 0.6, 3: 0.8}
LAYER_INTENSITY = {0: 0, 1: 85, 2: 170, 3: 255}
# all below the 0.25 depth-zero cutoff; 0.22 sits within the edge threshold
# of layer-1 shapes, so their outlines show in depth but not in the edge map
BACKGROUND_LUMAS = (0.06, 0.10, 0.14, 0.22)
# split-background shades: the divide line clears the edge threshold while
# both sides stay at depth 0, so the edge condition alone reveals it
BACKGROUND_SPLIT_SHADES = (0.02, 0.24)
_LUMA_W = np.array([0.299, 0.587, 0.114])

HUES = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "purple": (1.0, 0.0, 1.0),
}
SHAPE_WORDS = ("circle", "rectangle", "triangle")
POSITION_WORDS = ("top-left", "top-right", "bottom-left", "bottom-right")
VOCAB = ("a", "at") + tuple(HUES) + SHAPE_WORDS + POSITION_WORDS
_WORD_ID = {w: i for i, w in enumerate(VOCAB)}


class Split(Enum):
    TRAIN = "train"
    TEST = "test"
    DISCARD = "discard"


@dataclass
class Shape:
    kind: str  # circle | rectangle | triangle
    color: str  # hue word
    cx: float
    cy: float
    size: float  # circle radius / rect+triangle half-extent
    size2: float  # rect half-height (unused otherwise)
    layer: int  # 1..3, distinct within a scene


@dataclass
class SceneGraph:
    shapes: list[Shape]
    background: float  # gray level
    # optional two-tone background: columns >= split_col use background2
    background2: float | None = None
    split_col: int | None = None

    def subject(self) -> Shape:
        return max(self.shapes, key=lambda s: s.layer)


@dataclass
class ToySample:
    seed: int
    scene: SceneGraph
    target: np.ndarray  # (H, W, 3) float in [0, 1]
    conditions: dict[ConditionType, np.ndarray]
    caption_ids: np.ndarray
    caption: str
    scores: tuple[int, int, int]  # (cs, iq, sc)
    split: Split


def luma(img: np.ndarray) -> np.ndarray:
    return img @ _LUMA_W


def shape_color(hue_word: str, layer: int) -> np.ndarray:
    """The hue re-lit to its layer's luma band."""
    h = np.array(HUES[hue_word], dtype=np.float64)
    target = LAYER_LUMAS[layer]
    lh = float(h @ _LUMA_W)
    if lh >= target:
        return h * (target / lh)
    w = (target - lh) / (1.0 - lh)
    return h + w * (1.0 - h)


def _quantize(img: np.ndarray) -> np.ndarray:
    """Snap to 8-bit precision so PNG round-trips are exact."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def shape_mask(shape: Shape, size: int = IMAGE_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if shape.kind == "circle":
        return (xx - shape.cx) ** 2 + (yy - shape.cy) ** 2 <= shape.size ** 2
    if shape.kind == "rectangle":
        return (np.abs(xx - shape.cx) <= shape.size) & (np.abs(yy - shape.cy) <= shape.size2)
    if shape.kind == "triangle":
        # upward isoceles: apex at (cx, cy - s), base corners (cx -/+ s, cy + s)
        s = shape.size
        inside = yy <= shape.cy + s
        left = (yy - (shape.cy - s)) >= -2.0 * (xx - shape.cx)
        right = (yy - (shape.cy - s)) >= 2.0 * (xx - shape.cx)
        return inside & left & right
    raise ContractError(f"unknown shape kind {shape.kind!r}")


def render_target(scene: SceneGraph, size: int = IMAGE_SIZE) -> np.ndarray:
    canvas = np.full((size, size, 3), scene.background, dtype=np.float64)
    if scene.background2 is not None:
        canvas[:, scene.split_col:] = scene.background2
    for shape in sorted(scene.shapes, key=lambda s: s.layer):
        canvas[shape_mask(shape, size)] = shape_color(shape.color, shape.layer)
    return _quantize(canvas)


def edge_map(img: np.ndarray, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    """Binary map of luma-gradient magnitude above threshold.

    Forward differences, so a unit step produces a single one-pixel line on
    the darker side of the boundary.
    """
    if img.ndim != 3 or img.shape[-1] != 3:
        raise DimensionError(f"expected an RGB image, got shape {img.shape}")
    lum = luma(img)
    gx = np.zeros_like(lum)
    gy = np.zeros_like(lum)
    gx[:, :-1] = lum[:, 1:] - lum[:, :-1]
    gy[:-1, :] = lum[1:, :] - lum[:-1, :]
    return np.sqrt(gx * gx + gy * gy) > threshold


def depth_map(scene: SceneGraph, size: int = IMAGE_SIZE) -> np.ndarray:
    """Per-pixel topmost layer intensity; background is 0."""
    canvas = np.zeros((size, size), dtype=np.uint8)
    for shape in sorted(scene.shapes, key=lambda s: s.layer):
        canvas[shape_mask(shape, size)] = LAYER_INTENSITY[shape.layer]
    return canvas


def extract_depth(img: np.ndarray) -> np.ndarray:
    """Read the layer map back out of an image by luma band.

    Exact on rendered targets; the toy stand-in for a learned depth model
    when scoring generated images.
    """
    lum = luma(img)
    out = np.zeros(lum.shape, dtype=np.uint8)
    out[lum >= 0.25] = LAYER_INTENSITY[1]
    out[lum >= 0.50] = LAYER_INTENSITY[2]
    out[lum >= 0.70] = LAYER_INTENSITY[3]
    return out


def subject_image(scene: SceneGraph, size: int = IMAGE_SIZE) -> np.ndarray:
    """The subject shape re-centered on white."""
    s = scene.subject()
    centered = Shape(s.kind, s.color, size / 2, size / 2, s.size, s.size2, s.layer)
    canvas = np.ones((size, size, 3), dtype=np.float64)
    canvas[shape_mask(centered, size)] = shape_color(s.color, s.layer)
    return _quantize(canvas)


def mask_fill_image(scene: SceneGraph, target: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Target with a rectangular hole over the subject plus a mask channel."""
    s = scene.subject()
    mask = shape_mask(s, size)
    ys, xs = np.nonzero(mask)
    pad = 2
    y0, y1 = max(0, ys.min() - pad), min(size, ys.max() + pad + 1)
    x0, x1 = max(0, xs.min() - pad), min(size, xs.max() + pad + 1)
    hole = np.zeros((size, size), dtype=np.float64)
    hole[y0:y1, x0:x1] = 1.0
    rgb = target.copy()
    rgb[hole > 0] = 0.0
    return np.concatenate([rgb, hole[:, :, None]], axis=2)


def caption_for(scene: SceneGraph) -> tuple[str, np.ndarray]:
    s = scene.subject()
    vert = "top" if s.cy < IMAGE_SIZE / 2 else "bottom"
    horiz = "left" if s.cx < IMAGE_SIZE / 2 else "right"
    words = ["a", s.color, s.kind, "at", f"{vert}-{horiz}"]
    return " ".join(words), encode_caption(words)


def encode_caption(words: list[str]) -> np.ndarray:
    try:
        return np.array([_WORD_ID[w] for w in words], dtype=np.int64)
    except KeyError as exc:
        raise ContractError(f"word {exc.args[0]!r} not in vocabulary") from None


def decode_caption(ids) -> list[str]:
    return [VOCAB[int(i)] for i in ids]


def partition(scores: tuple[int, int, int]) -> Split:
    """Route a (composition, quality, consistency) triple to its split.

    All-fives train; otherwise cs >= 3 with perfect iq and sc tests;
    everything else is discarded. Branch order matters: the train condition
    is strictly stronger than the test condition.
    """
    cs, iq, sc = scores
    for s in (cs, iq, sc):
        if not isinstance(s, (int, np.integer)) or not 1 <= int(s) <= 5:
            raise ContractError(f"score {s!r} outside 1..5")
    if cs == 5 and iq == 5 and sc == 5:
        return Split.TRAIN
    if cs >= 3 and iq == 5 and sc == 5:
        return Split.TEST
    return Split.DISCARD


def gen_scene(seed: int) -> ToySample:
    """Deterministic sample: scene, target, all four condition maps, caption."""
    rng = np.random.default_rng(seed)
    n_shapes = int(rng.integers(1, 4))
    layers = sorted(rng.choice([1, 2, 3], size=n_shapes, replace=False).tolist())
    shapes = []
    for layer in layers:
        kind = str(rng.choice(SHAPE_WORDS))
        color = str(rng.choice(list(HUES)))
        size = float(rng.uniform(4.0, 8.0))
        size2 = float(rng.uniform(3.0, 7.0)) if kind == "rectangle" else size
        margin = max(size, size2) + 1.0
        cx = float(rng.uniform(margin, IMAGE_SIZE - margin))
        cy = float(rng.uniform(margin, IMAGE_SIZE - margin))
        shapes.append(Shape(kind, color, cx, cy, size, size2, int(layer)))
    if rng.uniform() < 0.5:
        dark, light = BACKGROUND_SPLIT_SHADES
        left, right = (dark, light) if rng.uniform() < 0.5 else (light, dark)
        scene = SceneGraph(shapes, background=left, background2=right,
                           split_col=int(rng.integers(8, 25)))
    else:
        scene = SceneGraph(shapes, background=float(rng.choice(BACKGROUND_LUMAS)))

    target = render_target(scene)
    conditions = {
        ConditionType.CANNY: edge_map(target),
        ConditionType.DEPTH: depth_map(scene),
        ConditionType.SUBJECT: subject_image(scene),
        ConditionType.MASK_FILL: mask_fill_image(scene, target),
    }
    caption, ids = caption_for(scene)
    score_dist = np.array([0.04, 0.06, 0.15, 0.20, 0.55])
    scores = tuple(int(s) for s in rng.choice([1, 2, 3, 4, 5], size=3, p=score_dist))
    return ToySample(
        seed=seed, scene=scene, target=target, conditions=conditions,
        caption_ids=ids, caption=caption, scores=scores, split=partition(scores),
    )


def subject_mask(scene: SceneGraph, size: int = IMAGE_SIZE) -> np.ndarray:
    return shape_mask(scene.subject(), size)


def subject_image_mask(scene: SceneGraph, size: int = IMAGE_SIZE) -> np.ndarray:
    """Occupancy of the re-centered shape inside the subject condition image."""
    s = scene.subject()
    centered = Shape(s.kind, s.color, size / 2, size / 2, s.size, s.size2, s.layer)
    return shape_mask(centered, size)


def hole_mask(sample: ToySample) -> np.ndarray:
    return sample.conditions[ConditionType.MASK_FILL][:, :, 3] > 0


# -- model-input conversion ----------------------------------------------------


def to_model_input(cond_type: ConditionType, sample: ToySample) -> np.ndarray:
    """Condition image as the 3-channel [-1, 1] block the embedder consumes."""
    cond = sample.conditions[cond_type]
    if cond_type == ConditionType.CANNY:
        rgb = np.repeat(cond[:, :, None].astype(np.float64), 3, axis=2)
    elif cond_type == ConditionType.DEPTH:
        rgb = np.repeat((cond / 255.0)[:, :, None], 3, axis=2)
    elif cond_type == ConditionType.SUBJECT:
        rgb = cond.astype(np.float64)
    elif cond_type == ConditionType.MASK_FILL:
        rgb = cond[:, :, :3].copy()
        rgb[cond[:, :, 3] > 0] = 0.5
    else:
        raise ContractError(f"no model-input conversion for {cond_type.name}")
    return rgb * 2.0 - 1.0


def cond_array_to_model_input(cond_type: ConditionType, arr: np.ndarray) -> np.ndarray:
    """Same conversion for a bare condition array (CLI-supplied images)."""
    if cond_type == ConditionType.CANNY:
        rgb = np.repeat((arr > 0.5).astype(np.float64)[:, :, None], 3, axis=2) \
            if arr.ndim == 2 else (arr > 0.5).astype(np.float64)
    elif cond_type == ConditionType.DEPTH:
        rgb = np.repeat(arr[:, :, None], 3, axis=2) if arr.ndim == 2 else arr
    elif cond_type == ConditionType.MASK_FILL and arr.ndim == 3 and arr.shape[2] == 4:
        rgb = arr[:, :, :3].copy()
        rgb[arr[:, :, 3] > 0] = 0.5
    else:
        rgb = arr if arr.ndim == 3 else np.repeat(arr[:, :, None], 3, axis=2)
    return rgb * 2.0 - 1.0


def to_train_example(sample: ToySample) -> TrainExample:
    return TrainExample(
        x1=sample.target * 2.0 - 1.0,
        caption_ids=sample.caption_ids,
        cond_inputs={ct: to_model_input(ct, sample) for ct in sample.conditions},
    )


# -- file I/O --------------------------------------------------------------------


def save_image(path: Path, arr: np.ndarray) -> None:
    """Lossless 8-bit PNG from a float [0,1] (or bool/uint8) array."""
    if arr.dtype == bool:
        data = (arr * np.uint8(255))
        mode = "L"
    elif arr.dtype == np.uint8:
        data, mode = arr, "L" if arr.ndim == 2 else None
    else:
        data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
        mode = None
    img = Image.fromarray(data, mode=mode)
    img.save(path, format="PNG")


def load_image(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    return arr.astype(np.float64) / 255.0


_COND_FILES = {
    ConditionType.CANNY: "canny.png",
    ConditionType.DEPTH: "depth.png",
    ConditionType.SUBJECT: "subject.png",
    ConditionType.MASK_FILL: "maskfill.png",
}


def write_dataset(out_dir: Path, count: int, seed: int) -> Path:
    """Generate ``count`` samples under out_dir; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for i in range(count):
            sample = gen_scene(seed + i)
            stem = f"sample_{seed + i:08d}"
            sdir = out_dir / stem
            sdir.mkdir(exist_ok=True)
            save_image(sdir / "target.png", sample.target)
            save_image(sdir / "canny.png", sample.conditions[ConditionType.CANNY])
            save_image(sdir / "depth.png", sample.conditions[ConditionType.DEPTH])
            save_image(sdir / "subject.png", sample.conditions[ConditionType.SUBJECT])
            mf = sample.conditions[ConditionType.MASK_FILL]
            Image.fromarray(
                np.round(np.clip(mf, 0, 1) * 255).astype(np.uint8), mode="RGBA"
            ).save(sdir / "maskfill.png", format="PNG")
            record = {
                "seed": sample.seed,
                "dir": stem,
                "caption": sample.caption,
                "caption_ids": sample.caption_ids.tolist(),
                "scores": list(sample.scores),
                "split": sample.split.value,
            }
            fh.write(json.dumps(record) + "\n")
    return manifest


def read_manifest(manifest: Path) -> list[dict]:
    records = []
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def load_sample_arrays(data_dir: Path, record: dict) -> dict:
    """Target plus condition arrays for one manifest record."""
    sdir = Path(data_dir) / record["dir"]
    target = load_image(sdir / "target.png")
    out = {"target": target, "conditions": {}}
    for ct, fname in _COND_FILES.items():
        arr = np.asarray(Image.open(sdir / fname))
        if ct == ConditionType.CANNY:
            out["conditions"][ct] = arr > 127
        elif ct == ConditionType.DEPTH:
            out["conditions"][ct] = arr.astype(np.uint8)
        elif ct == ConditionType.MASK_FILL:
            out["conditions"][ct] = arr.astype(np.float64) / 255.0
        else:
            out["conditions"][ct] = arr.astype(np.float64) / 255.0
    return out


def record_to_train_example(data_dir: Path, record: dict) -> TrainExample:
    arrays = load_sample_arrays(data_dir, record)
    pseudo = ToySample(
        seed=record["seed"], scene=None, target=arrays["target"],
        conditions=arrays["conditions"],
        caption_ids=np.array(record["caption_ids"], dtype=np.int64),
        caption=record["caption"], scores=tuple(record["scores"]),
        split=Split(record["split"]),
    )
    return to_train_example(pseudo)

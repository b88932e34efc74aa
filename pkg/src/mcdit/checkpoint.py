"""Single-file checkpoint container.

Layout: magic "UCKP", format version, CRC32 of the payload, payload length,
then the payload: a JSON header (model config + run metadata) followed by
named tensors (name, dtype tag, shape, little-endian raw scalars). Writes go
through a temp file and an atomic rename; loads verify the checksum and
refuse corrupted files. Round-trips are bit-exact.

Adapter tensors use the key scheme ``cond_lora/<TYPE>/<block>/<proj>/{A,B}``
and ``denoise_lora/<block>/<proj>/{A,B}`` (plus ``text_lora/...`` for the
ablation); base weights are ``base/<name>`` and optimizer slots ``optim/...``.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .lora import ConditionType, LoraAdapter, LoraRegistry
from .model import Model, ModelConfig, lora_target_specs, text_lora_target_specs

MAGIC = b"UCKP"
VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8"}
_DTYPE_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class Checkpoint:
    config: dict
    meta: dict
    tensors: dict[str, np.ndarray]


def save_checkpoint(path: Path, config: dict, tensors: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    path = Path(path)
    parts = []
    header = json.dumps({"config": config, "meta": meta or {}}).encode()
    parts.append(struct.pack("<I", len(header)))
    parts.append(header)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _DTYPE_TAGS:
            arr = arr.astype(np.float32)
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    payload = b"".join(parts)
    blob = MAGIC + struct.pack("<II", VERSION, zlib.crc32(payload)) \
        + struct.pack("<Q", len(payload)) + payload
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, crc = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (length,) = struct.unpack("<Q", blob[12:20])
    payload = blob[20:20 + length]
    if len(payload) != length or zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, refusing to load")

    off = 0
    (hlen,) = struct.unpack_from("<I", payload, off)
    off += 4
    header = json.loads(payload[off:off + hlen].decode())
    off += hlen
    (count,) = struct.unpack_from("<I", payload, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", payload, off)
        off += 2
        name = payload[off:off + nlen].decode()
        off += nlen
        tag, ndim = struct.unpack_from("<BB", payload, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", payload, off)
        off += 4 * ndim
        dtype = np.dtype(_DTYPES[tag])
        nbytes = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(payload[off:off + nbytes], dtype=dtype).reshape(shape)
        off += nbytes
        tensors[name] = arr.copy()
    return Checkpoint(config=header["config"], meta=header["meta"], tensors=tensors)


# -- model / registry packing -----------------------------------------------------


def pack_state(model: Model, registry: LoraRegistry | None = None,
               optim_state: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    tensors = {f"base/{k}": t.data for k, t in model.params.items()}
    if registry is not None:
        for ct, adapter in registry.condition_adapters.items():
            for k, t in adapter.parameters().items():
                tensors[f"cond_lora/{ct.name}/{k}"] = t.data
        if registry.denoising_adapter is not None:
            for k, t in registry.denoising_adapter.parameters().items():
                tensors[f"denoise_lora/{k}"] = t.data
        if registry.text_adapter is not None:
            for k, t in registry.text_adapter.parameters().items():
                tensors[f"text_lora/{k}"] = t.data
    if optim_state:
        for k, arr in optim_state.items():
            tensors[f"optim/{k}"] = arr
    return tensors


def save_run(path: Path, model: Model, registry: LoraRegistry | None = None,
             meta: dict | None = None, optim_state: dict | None = None) -> None:
    meta = dict(meta or {})
    if registry is not None:
        ranks = {}
        alphas = {}
        for ct, adapter in registry.condition_adapters.items():
            ranks[f"cond_lora/{ct.name}"] = adapter.rank
            alphas[f"cond_lora/{ct.name}"] = adapter.alpha
        if registry.denoising_adapter is not None:
            ranks["denoise_lora"] = registry.denoising_adapter.rank
            alphas["denoise_lora"] = registry.denoising_adapter.alpha
        if registry.text_adapter is not None:
            ranks["text_lora"] = registry.text_adapter.rank
            alphas["text_lora"] = registry.text_adapter.alpha
        meta["lora_ranks"] = ranks
        meta["lora_alphas"] = alphas
    save_checkpoint(path, model.config.to_dict(),
                    pack_state(model, registry, optim_state), meta)


def _load_adapter(specs, group: dict[str, np.ndarray], rank: int, alpha: float) -> LoraAdapter:
    adapter = LoraAdapter(specs, rank=rank, alpha=alpha)
    for name in adapter.weights:
        a_key, b_key = f"{name}/A", f"{name}/B"
        if a_key not in group or b_key not in group:
            raise CheckpointError(f"adapter group missing {a_key} or {b_key}")
        a, b = adapter.weights[name]
        a.data = np.asarray(group[a_key], dtype=a.data.dtype)
        b.data = np.asarray(group[b_key], dtype=b.data.dtype)
    return adapter


def load_run(path: Path) -> tuple[Model, LoraRegistry, dict, dict[str, np.ndarray]]:
    """Rebuild the model and adapter registry from a checkpoint.

    Returns (model, registry, meta, optimizer_state).
    """
    ckpt = load_checkpoint(path)
    config = ModelConfig.from_dict(ckpt.config)
    model = Model(config)
    base = {k[len("base/"):]: v for k, v in ckpt.tensors.items() if k.startswith("base/")}
    model.load_state(base)

    registry = LoraRegistry()
    ranks = ckpt.meta.get("lora_ranks", {})
    alphas = ckpt.meta.get("lora_alphas", {})
    groups: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in ckpt.tensors.items():
        if key.startswith("cond_lora/"):
            _, type_name, rest = key.split("/", 2)
            groups.setdefault(f"cond_lora/{type_name}", {})[rest] = arr
        elif key.startswith("denoise_lora/"):
            groups.setdefault("denoise_lora", {})[key[len("denoise_lora/"):]] = arr
        elif key.startswith("text_lora/"):
            groups.setdefault("text_lora", {})[key[len("text_lora/"):]] = arr
    for gname, group in groups.items():
        rank = int(ranks.get(gname, 4))
        alpha = float(alphas.get(gname, rank))
        if gname.startswith("cond_lora/"):
            ct = ConditionType[gname.split("/", 1)[1]]
            registry.register(ct, _load_adapter(lora_target_specs(config), group, rank, alpha))
        elif gname == "denoise_lora":
            registry.denoising_adapter = _load_adapter(lora_target_specs(config), group, rank, alpha)
        else:
            registry.text_adapter = _load_adapter(text_lora_target_specs(config), group, rank, alpha)

    optim = {k[len("optim/"):]: v for k, v in ckpt.tensors.items() if k.startswith("optim/")}
    return model, registry, ckpt.meta, optim

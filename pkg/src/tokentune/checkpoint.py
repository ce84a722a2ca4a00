"""Checkpoints: a JSON header line plus little-endian raw float payload.

The header records the model config, dtype, and an ordered manifest of
parameter names, shapes, and frozen flags; the payload is the raw bytes of
each array in manifest order. Round-trips are bit-exact. Adapter-only
checkpoints use the same container with their own manifest.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .adapters import LoraAdapter
from .config import ModelConfig
from .model import Parameter, TransformerModel

MODEL_MAGIC = "tokentune-checkpoint"
ADAPTER_MAGIC = "tokentune-adapters"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _dtype_tag(dtype) -> str:
    return {"float32": "<f4", "float64": "<f8"}[np.dtype(dtype).name]


def _write(path, header: dict, arrays: list[np.ndarray]) -> None:
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(blob + b"\n")
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"),
                                                      copy=False).tobytes())


def _read(path, magic: str) -> tuple[dict, bytes]:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = p.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"corrupted checkpoint (no header): {path}")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupted checkpoint header: {exc}") from exc
    if header.get("format") != magic:
        raise CheckpointError(f"not a {magic} file: {path}")
    return header, raw[nl + 1:]


def save_model(model: TransformerModel, path) -> None:
    dtype = np.dtype(model.dtype)
    entries = []
    arrays = []
    for name, p in model.param_items():
        entries.append({"name": name, "rows": int(p.value.shape[0]),
                        "cols": int(p.value.shape[1]),
                        "frozen": bool(p.frozen)})
        arrays.append(p.value)
    header = {
        "format": MODEL_MAGIC,
        "version": VERSION,
        "dtype": dtype.name,
        "config": dataclasses.asdict(model.config),
        "params": entries,
    }
    _write(path, header, arrays)


def load_model(path) -> TransformerModel:
    header, payload = _read(path, MODEL_MAGIC)
    config = ModelConfig(**header["config"])
    tag = _dtype_tag(header["dtype"])
    width = np.dtype(tag).itemsize
    params: dict[str, Parameter] = {}
    offset = 0
    for entry in header["params"]:
        count = entry["rows"] * entry["cols"]
        chunk = payload[offset:offset + count * width]
        if len(chunk) != count * width:
            raise CheckpointError(f"truncated payload at '{entry['name']}'")
        arr = np.frombuffer(chunk, dtype=tag).reshape(entry["rows"],
                                                      entry["cols"]).copy()
        params[entry["name"]] = Parameter(arr, frozen=bool(entry["frozen"]))
        offset += count * width
    if offset != len(payload):
        raise CheckpointError("payload length does not match manifest")
    return TransformerModel(config, params)


def save_adapters(model: TransformerModel, path) -> None:
    if not model.adapters:
        raise CheckpointError("model has no adapters to save")
    entries = []
    arrays = []
    for name, ad in model.adapters.items():
        entries.append({"target": name, "r": ad.r, "alpha": ad.alpha,
                        "a_rows": int(ad.a.shape[0]),
                        "a_cols": int(ad.a.shape[1]),
                        "b_rows": int(ad.b.shape[0]),
                        "b_cols": int(ad.b.shape[1])})
        arrays.extend([ad.a, ad.b])
    header = {
        "format": ADAPTER_MAGIC,
        "version": VERSION,
        "dtype": np.dtype(model.dtype).name,
        "adapters": entries,
    }
    _write(path, header, arrays)


def load_adapters(model: TransformerModel, path) -> TransformerModel:
    """Attach saved adapter factors onto a matching base model."""
    header, payload = _read(path, ADAPTER_MAGIC)
    tag = _dtype_tag(header["dtype"])
    width = np.dtype(tag).itemsize
    offset = 0
    for entry in header["adapters"]:
        target = entry["target"]
        if target not in model.params:
            raise CheckpointError(f"adapter target '{target}' missing from model")
        base = model.param(target).value
        if base.shape != (entry["a_rows"], entry["b_cols"]):
            raise CheckpointError(f"adapter '{target}' shape mismatch with base")
        blocks = []
        for rows, cols in ((entry["a_rows"], entry["a_cols"]),
                           (entry["b_rows"], entry["b_cols"])):
            count = rows * cols
            chunk = payload[offset:offset + count * width]
            if len(chunk) != count * width:
                raise CheckpointError(f"truncated adapter payload at '{target}'")
            blocks.append(np.frombuffer(chunk, dtype=tag).reshape(rows, cols).copy())
            offset += count * width
        a, b = blocks
        model.adapters[target] = LoraAdapter(
            target=target, a=a, b=b,
            scaling=float(entry["alpha"]) / float(entry["r"]),
            r=int(entry["r"]), alpha=float(entry["alpha"]))
    for p in model.params.values():
        p.frozen = True
    return model

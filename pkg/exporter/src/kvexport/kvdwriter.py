"""Standalone KVD file writer.

The downstream analysis toolkit reads this format; the two packages share
no code, only these bytes: a 4-byte magic, a little-endian u32 header
length, a sorted-key JSON header, then row-major little-endian tensors,
layer-major with K before V.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"KVD1"
LAYOUT_TAG = "layer-major/K-then-V/row-major"
DTYPES = ("f32", "f16", "bf16")


def encode(arr: np.ndarray, dtype: str) -> bytes:
    a = np.ascontiguousarray(arr, dtype=np.float32)
    if dtype == "f32":
        return a.astype("<f4").tobytes()
    if dtype == "f16":
        return a.astype("<f2").tobytes()
    if dtype == "bf16":
        bits = a.view(np.uint32)
        # round to nearest even on the dropped 16 mantissa bits
        rounded = (bits + (((bits >> 16) & 1) + np.uint32(0x7FFF))) >> 16
        return rounded.astype("<u2").tobytes()
    raise ValueError(f"unsupported dtype {dtype!r}")


def write_kvd(
    path,
    *,
    model_id: str,
    num_kv_heads: int,
    head_dim: int,
    keys_pre_rope: bool,
    rope_base: float,
    keys: list[np.ndarray],
    values: list[np.ndarray],
    dtype: str = "f32",
) -> None:
    """Write one K and one V matrix per layer, prompt-only (no tail)."""
    if dtype not in DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    if len(keys) != len(values) or not keys:
        raise ValueError("need one K and one V matrix per layer")
    seq_len, width = keys[0].shape
    if width != num_kv_heads * head_dim:
        raise ValueError(f"width {width} != {num_kv_heads} * {head_dim}")
    for m in keys + values:
        if m.shape != (seq_len, width):
            raise ValueError("all layers must share one shape")
        if not np.isfinite(m).all():
            raise ValueError("non-finite cache entries")

    header = {
        "model_id": model_id,
        "num_layers": len(keys),
        "num_kv_heads": num_kv_heads,
        "head_dim": head_dim,
        "seq_len": seq_len,
        "dtype": dtype,
        "keys_pre_rope": bool(keys_pre_rope),
        "rope_base": float(rope_base),
        "layout": LAYOUT_TAG,
        "tail_len": 0,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for K, V in zip(keys, values):
            fh.write(encode(K, dtype))
            fh.write(encode(V, dtype))

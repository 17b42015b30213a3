"""KV-cache data model and the KVD interchange file format.

A dump is the unit of ingestion: per-layer key/value matrices plus model
metadata, stored on disk as ``KVD1`` magic + JSON header + raw row-major
tensors.  In memory all tensors are float32 regardless of the storage
dtype; numerical kernels widen to float64 internally.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    BadMagic,
    HeaderMismatch,
    InvalidConfig,
    IoFailure,
    NonFinite,
    UnsupportedDtype,
)

MAGIC = b"KVD1"
LAYOUT_TAG = "layer-major/K-then-V/row-major"
DTYPES = ("f32", "f16", "bf16")
_DTYPE_BYTES = {"f32": 4, "f16": 2, "bf16": 2}


@dataclass(frozen=True)
class CacheMeta:
    """Model-level metadata shared by every layer of a dump."""

    model_id: str
    num_layers: int
    num_kv_heads: int
    head_dim: int
    seq_len: int
    dtype: str = "f32"
    keys_pre_rope: bool = True
    rope_base: float = 10000.0
    layout: str = LAYOUT_TAG

    def __post_init__(self):
        for name in ("num_layers", "num_kv_heads", "head_dim", "seq_len"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfig(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.dtype not in DTYPES:
            raise UnsupportedDtype(f"dtype must be one of {DTYPES}, got {self.dtype!r}")
        if self.rope_base <= 0:
            raise InvalidConfig("rope_base must be positive")
        if self.layout != LAYOUT_TAG:
            raise HeaderMismatch(f"unknown layout tag {self.layout!r}")

    @property
    def width(self) -> int:
        """Flattened per-layer width: kv heads times head dim."""
        return self.num_kv_heads * self.head_dim


@dataclass
class LayerCache:
    """One layer's key and value matrices, rows are tokens."""

    layer_index: int
    K: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.K = _as_f32(self.K)
        self.V = _as_f32(self.V)
        if self.K.shape != self.V.shape or self.K.ndim != 2:
            raise InvalidConfig(
                f"layer {self.layer_index}: K {self.K.shape} and V {self.V.shape} "
                "must be matrices of identical shape"
            )
        if not (np.isfinite(self.K).all() and np.isfinite(self.V).all()):
            raise NonFinite(f"layer {self.layer_index} contains NaN/Inf entries")


@dataclass
class CacheDump:
    """All layers of one capture, plus the optional uncompressed decode tail.

    ``tail`` holds per-layer caches for tokens generated after the prompt;
    they are never compressed and are consumed only by attention evaluation.
    ``queries`` optionally carries per-layer query states (one matrix per
    layer) captured alongside the caches.
    """

    meta: CacheMeta
    layers: list[LayerCache]
    tail: list[LayerCache] = field(default_factory=list)
    queries: list[np.ndarray] | None = None

    def __post_init__(self):
        m = self.meta
        if len(self.layers) != m.num_layers:
            raise InvalidConfig(f"expected {m.num_layers} layers, got {len(self.layers)}")
        for i, layer in enumerate(self.layers):
            if layer.layer_index != i:
                raise InvalidConfig(f"layers[{i}].layer_index == {layer.layer_index}")
            if layer.K.shape != (m.seq_len, m.width):
                raise InvalidConfig(
                    f"layer {i}: shape {layer.K.shape} != ({m.seq_len}, {m.width})"
                )
        if self.tail:
            if len(self.tail) != m.num_layers:
                raise InvalidConfig("tail must have one LayerCache per layer")
            t0 = self.tail[0].K.shape[0]
            for i, layer in enumerate(self.tail):
                if layer.layer_index != i or layer.K.shape != (t0, m.width):
                    raise InvalidConfig(f"tail[{i}] malformed")
        if self.queries is not None:
            if len(self.queries) != m.num_layers:
                raise InvalidConfig("queries must have one matrix per layer")
            self.queries = [_as_f32(q) for q in self.queries]
            q0 = self.queries[0].shape
            for q in self.queries:
                if q.ndim != 2 or q.shape != q0 or q.shape[1] % m.head_dim:
                    raise InvalidConfig("query matrices must share a heads*head_dim shape")
                if not np.isfinite(q).all():
                    raise NonFinite("query matrix contains NaN/Inf entries")

    @property
    def tail_len(self) -> int:
        return self.tail[0].K.shape[0] if self.tail else 0


def _as_f32(arr) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float32)
    out.setflags(write=False)
    return out


# --- storage dtype codecs -------------------------------------------------

def _encode(arr: np.ndarray, dtype: str) -> bytes:
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
    raise UnsupportedDtype(dtype)


def _decode(buf: bytes, dtype: str, shape: tuple[int, int]) -> np.ndarray:
    if dtype == "f32":
        a = np.frombuffer(buf, dtype="<f4").astype(np.float32)
    elif dtype == "f16":
        a = np.frombuffer(buf, dtype="<f2").astype(np.float32)
    elif dtype == "bf16":
        a = (np.frombuffer(buf, dtype="<u2").astype(np.uint32) << 16).view(np.float32)
    else:
        raise UnsupportedDtype(dtype)
    return a.reshape(shape)


def quantize_like(arr: np.ndarray, dtype: str) -> np.ndarray:
    """Round an f32 array to the values representable in a storage dtype."""
    if dtype == "f32":
        return np.asarray(arr, dtype=np.float32)
    return _decode(_encode(np.asarray(arr), dtype), dtype, arr.shape)


# --- file format ----------------------------------------------------------

def _header_dict(dump: CacheDump) -> dict:
    m = dump.meta
    hdr = {
        "model_id": m.model_id,
        "num_layers": m.num_layers,
        "num_kv_heads": m.num_kv_heads,
        "head_dim": m.head_dim,
        "seq_len": m.seq_len,
        "dtype": m.dtype,
        "keys_pre_rope": m.keys_pre_rope,
        "rope_base": m.rope_base,
        "layout": m.layout,
        "tail_len": dump.tail_len,
    }
    if dump.queries is not None:
        hdr["q_len"] = dump.queries[0].shape[0]
        hdr["q_heads"] = dump.queries[0].shape[1] // m.head_dim
    return hdr


def expected_payload_bytes(meta: CacheMeta, tail_len: int = 0,
                           q_len: int = 0, q_heads: int = 0) -> int:
    """Exact payload size in bytes; the file must match this to the byte."""
    item = _DTYPE_BYTES[meta.dtype]
    n, d = meta.num_layers, meta.width
    total = 2 * n * meta.seq_len * d + 2 * n * tail_len * d
    total += n * q_len * q_heads * meta.head_dim
    return total * item


def write_dump(dump: CacheDump, path) -> None:
    """Write a dump in the KVD format; ``read_dump`` inverts it exactly."""
    header = json.dumps(_header_dict(dump), sort_keys=True).encode("utf-8")
    dtype = dump.meta.dtype
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for layer in dump.layers:
                fh.write(_encode(layer.K, dtype))
                fh.write(_encode(layer.V, dtype))
            for layer in dump.tail:
                fh.write(_encode(layer.K, dtype))
                fh.write(_encode(layer.V, dtype))
            if dump.queries is not None:
                for q in dump.queries:
                    fh.write(_encode(q, dtype))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_dump(path) -> CacheDump:
    """Read a KVD file, widening tensors to float32 in memory."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc

    if len(raw) < 8 or raw[:4] != MAGIC:
        raise BadMagic(f"{path} does not start with {MAGIC!r}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise HeaderMismatch("file shorter than declared header length")
    try:
        hdr = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
        meta = CacheMeta(
            model_id=hdr["model_id"],
            num_layers=int(hdr["num_layers"]),
            num_kv_heads=int(hdr["num_kv_heads"]),
            head_dim=int(hdr["head_dim"]),
            seq_len=int(hdr["seq_len"]),
            dtype=hdr["dtype"],
            keys_pre_rope=bool(hdr["keys_pre_rope"]),
            rope_base=float(hdr["rope_base"]),
            layout=hdr["layout"],
        )
        tail_len = int(hdr["tail_len"])
        q_len = int(hdr.get("q_len", 0))
        q_heads = int(hdr.get("q_heads", 0))
    except (KeyError, ValueError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderMismatch(f"malformed header: {exc}") from exc
    if tail_len < 0 or q_len < 0 or q_heads < 0:
        raise HeaderMismatch("negative section length in header")

    payload = raw[8 + hlen :]
    want = expected_payload_bytes(meta, tail_len, q_len, q_heads)
    if len(payload) != want:
        raise HeaderMismatch(
            f"payload is {len(payload)} bytes, header implies {want}"
        )

    item = _DTYPE_BYTES[meta.dtype]
    d = meta.width
    pos = 0

    def take(rows: int) -> np.ndarray:
        nonlocal pos
        nbytes = rows * d * item
        block = _decode(payload[pos : pos + nbytes], meta.dtype, (rows, d))
        pos += nbytes
        return block

    layers = []
    for i in range(meta.num_layers):
        layers.append(LayerCache(i, take(meta.seq_len), take(meta.seq_len)))
    tail = []
    if tail_len:
        for i in range(meta.num_layers):
            tail.append(LayerCache(i, take(tail_len), take(tail_len)))
    queries = None
    if q_len:
        qd = q_heads * meta.head_dim
        queries = []
        for _ in range(meta.num_layers):
            nbytes = q_len * qd * item
            q = _decode(payload[pos : pos + nbytes], meta.dtype, (q_len, qd))
            if not np.isfinite(q).all():
                raise NonFinite("query section contains NaN/Inf")
            queries.append(q)
            pos += nbytes
    return CacheDump(meta=meta, layers=layers, tail=tail, queries=queries)


# --- synthetic dumps ------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Generative model for dumps with a controllable cross-layer structure.

    Each layer's cache (keys and values drawn independently) is

        X = alignment * C @ W  +  (1 - alignment) * C_l @ P_l  +  noise * E

    where C is a shared column basis, C_l a per-layer one, W / P_l are
    mixing matrices with orthonormal rows (scaled by sqrt(width) so signal
    energy scales with the matrix size), and E is unit-variance noise.
    With alignment 1 and no noise every layer has an identical centered
    Gram matrix, which forces pairwise CKA to 1.
    """

    num_layers: int = 8
    seq_len: int = 512
    num_kv_heads: int = 1
    head_dim: int = 64
    shared_rank: int = 8
    private_rank: int = 4
    noise: float = 0.01
    alignment: float = 0.8
    seed: int = 0
    tail_len: int = 0
    model_id: str = "synth"
    rope_base: float = 10000.0

    def __post_init__(self):
        d = self.num_kv_heads * self.head_dim
        if not 0.0 <= self.alignment <= 1.0:
            raise InvalidConfig(f"alignment must be in [0, 1], got {self.alignment}")
        if self.noise < 0:
            raise InvalidConfig("noise scale must be >= 0")
        if self.shared_rank < 0 or self.private_rank < 0:
            raise InvalidConfig("ranks must be >= 0")
        if self.shared_rank + self.private_rank > min(self.seq_len, d):
            raise InvalidConfig(
                f"shared_rank + private_rank = {self.shared_rank + self.private_rank} "
                f"exceeds min(seq_len, width) = {min(self.seq_len, d)}"
            )
        if self.tail_len < 0:
            raise InvalidConfig("tail_len must be >= 0")


def _orth_cols(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    if cols == 0:
        return np.zeros((rows, 0))
    q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q


def synth_dump(cfg: SynthConfig) -> CacheDump:
    """Deterministically generate a dump from the shared+private+noise model."""
    d = cfg.num_kv_heads * cfg.head_dim
    rows = cfg.seq_len + cfg.tail_len
    rng = np.random.default_rng(cfg.seed)

    # one shared basis per side, drawn before any per-layer randomness
    shared = {side: _orth_cols(rng, rows, cfg.shared_rank) for side in ("key", "value")}

    def one_matrix(side: str) -> np.ndarray:
        c_priv = _orth_cols(rng, rows, cfg.private_rank)
        mix_shared = _orth_cols(rng, d, cfg.shared_rank).T * np.sqrt(d)
        mix_priv = _orth_cols(rng, d, cfg.private_rank).T * np.sqrt(d)
        x = cfg.alignment * shared[side] @ mix_shared
        x = x + (1.0 - cfg.alignment) * c_priv @ mix_priv
        if cfg.noise > 0:
            x = x + cfg.noise * rng.standard_normal((rows, d))
        return x.astype(np.float32)

    full_k = [one_matrix("key") for _ in range(cfg.num_layers)]
    full_v = [one_matrix("value") for _ in range(cfg.num_layers)]

    meta = CacheMeta(
        model_id=cfg.model_id,
        num_layers=cfg.num_layers,
        num_kv_heads=cfg.num_kv_heads,
        head_dim=cfg.head_dim,
        seq_len=cfg.seq_len,
        dtype="f32",
        keys_pre_rope=True,
        rope_base=cfg.rope_base,
    )
    layers = [
        LayerCache(i, k[: cfg.seq_len], v[: cfg.seq_len])
        for i, (k, v) in enumerate(zip(full_k, full_v))
    ]
    tail = []
    if cfg.tail_len:
        tail = [
            LayerCache(i, k[cfg.seq_len :], v[cfg.seq_len :])
            for i, (k, v) in enumerate(zip(full_k, full_v))
        ]
    return CacheDump(meta=meta, layers=layers, tail=tail)


def with_meta(dump: CacheDump, **changes) -> CacheDump:
    """Copy of a dump with selected meta fields replaced."""
    return CacheDump(
        meta=replace(dump.meta, **changes),
        layers=dump.layers,
        tail=dump.tail,
        queries=dump.queries,
    )

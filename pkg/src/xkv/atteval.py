"""Attention-level fidelity evaluation.

Reconstruction error in the cache is only a proxy; what matters is how
much the attention output moves.  This module runs a reference grouped
multi-head attention forward pass (float64 throughout, numerically
stable softmax) over original and reconstructed caches and reports
relative output error and per-head cosine similarity.

Keys stored before rotary embedding are rotated here, after
reconstruction, so compression operates on the smooth pre-rotation
representation while evaluation sees what the model would see.  Query
matrices are taken as already rotated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import HeadMismatch, InvalidConfig, NonFinite, OddHeadDim
from .kvdump import CacheDump
from .compress import CompressedDump, compress, compression_rate, reconstruct


@dataclass(frozen=True)
class RopeConfig:
    """Rotary embedding parameters: pair (2i, 2i+1) of every head rotates
    by angle position * base**(-2i/head_dim)."""

    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2:
            raise OddHeadDim(f"head_dim must be even and >= 2, got {self.head_dim}")
        if self.base <= 0:
            raise InvalidConfig("rope base must be positive")

    def angles(self, positions: np.ndarray) -> np.ndarray:
        """positions x head_dim/2 rotation angles."""
        half = self.head_dim // 2
        inv_freq = self.base ** (-np.arange(half, dtype=np.float64) * 2.0 / self.head_dim)
        return np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]


def apply_rope(X: np.ndarray, cfg: RopeConfig, positions: np.ndarray) -> np.ndarray:
    """Rotate every head's interleaved (even, odd) column pairs per token.

    A pure per-token rotation: row norms are preserved exactly, so
    Frobenius distances between caches are identical before and after.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] % cfg.head_dim:
        raise HeadMismatch(
            f"width {X.shape[1] if X.ndim == 2 else X.shape} is not a multiple "
            f"of head_dim {cfg.head_dim}"
        )
    if len(positions) != X.shape[0]:
        raise InvalidConfig("one position per row required")
    rows, width = X.shape
    heads = width // cfg.head_dim
    theta = cfg.angles(positions)  # rows x half
    cos = np.cos(theta)[:, None, :]
    sin = np.sin(theta)[:, None, :]
    pairs = X.reshape(rows, heads, cfg.head_dim // 2, 2)
    even, odd = pairs[..., 0], pairs[..., 1]
    out = np.empty_like(pairs)
    out[..., 0] = even * cos - odd * sin
    out[..., 1] = even * sin + odd * cos
    return out.reshape(rows, width)


def attention_forward(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    num_kv_heads: int,
    head_dim: int,
    causal: bool = True,
    return_probs: bool = False,
):
    """Grouped-query attention with a trailing causal window.

    Query rows are the last ``Q.shape[0]`` positions of the key sequence:
    query row i may attend keys j <= i + (len(K) - len(Q)).  Query head h
    reads kv head h // (num_query_heads // num_kv_heads).  All math in
    float64 with max-subtracted softmax.
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if not (np.isfinite(Q).all() and np.isfinite(K).all() and np.isfinite(V).all()):
        raise NonFinite("attention inputs contain NaN/Inf")
    if Q.ndim != 2 or K.shape != V.shape or K.ndim != 2:
        raise HeadMismatch("Q, K, V must be matrices with K and V alike")
    if Q.shape[1] % head_dim or K.shape[1] != num_kv_heads * head_dim:
        raise HeadMismatch(
            f"Q width {Q.shape[1]} / K width {K.shape[1]} inconsistent with "
            f"{num_kv_heads} kv heads of dim {head_dim}"
        )
    num_q_heads = Q.shape[1] // head_dim
    if num_q_heads % num_kv_heads:
        raise HeadMismatch(
            f"{num_q_heads} query heads not a multiple of {num_kv_heads} kv heads"
        )
    lq, lk = Q.shape[0], K.shape[0]
    if lq > lk:
        raise InvalidConfig(f"{lq} query rows exceed {lk} key rows")

    group = num_q_heads // num_kv_heads
    qh = Q.reshape(lq, num_q_heads, head_dim)
    kh = K.reshape(lk, num_kv_heads, head_dim)
    vh = V.reshape(lk, num_kv_heads, head_dim)
    scale = 1.0 / math.sqrt(head_dim)
    offset = lk - lq
    out = np.empty((lq, num_q_heads, head_dim))
    probs = np.empty((lq, num_q_heads, lk)) if return_probs else None
    if causal:
        blocked = np.arange(lk)[None, :] > (np.arange(lq)[:, None] + offset)
    for h in range(num_kv_heads):
        sl = slice(h * group, (h + 1) * group)
        logits = np.einsum("qgd,kd->qgk", qh[:, sl], kh[:, h]) * scale
        if causal:
            logits[blocked[:, None, :].repeat(group, axis=1)] = -np.inf
        logits -= logits.max(axis=-1, keepdims=True)
        weights = np.exp(logits)
        weights /= weights.sum(axis=-1, keepdims=True)
        out[:, sl] = np.einsum("qgk,kd->qgd", weights, vh[:, h])
        if return_probs:
            probs[:, sl] = weights
    out = out.reshape(lq, num_q_heads * head_dim)
    return (out, probs) if return_probs else out


@dataclass(frozen=True)
class QuerySource:
    """Where evaluation queries come from: the dump's captured query
    section when present, otherwise seeded standard normal matrices."""

    q_heads_per_kv: int = 4
    num_queries: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.q_heads_per_kv < 1 or self.num_queries < 1:
            raise InvalidConfig("q_heads_per_kv and num_queries must be >= 1")


def _layer_queries(dump: CacheDump, source: QuerySource,
                   total_len: int) -> list[np.ndarray]:
    meta = dump.meta
    if dump.queries is not None:
        q0 = dump.queries[0]
        if q0.shape[0] > total_len:
            raise InvalidConfig(
                f"{q0.shape[0]} captured queries exceed {total_len} cached tokens"
            )
        heads = q0.shape[1] // meta.head_dim
        if heads % meta.num_kv_heads:
            raise HeadMismatch(
                f"{heads} captured query heads not a multiple of "
                f"{meta.num_kv_heads} kv heads"
            )
        return [np.asarray(q, dtype=np.float64) for q in dump.queries]
    rng = np.random.default_rng(source.seed)
    lq = min(source.num_queries, total_len)
    width = source.q_heads_per_kv * meta.num_kv_heads * meta.head_dim
    return [rng.standard_normal((lq, width)) for _ in range(meta.num_layers)]


@dataclass
class LayerFidelity:
    layer: int
    key_rel_err: float
    value_rel_err: float
    attn_out_rel_err: float
    attn_out_cos: float


@dataclass
class FidelityReport:
    """Per-layer and aggregate fidelity of one compression plan."""

    method: str
    group_size: int
    key_rank: int
    value_rank: int
    rate: float
    layers: list[LayerFidelity] = field(default_factory=list)

    @property
    def mean_key_rel_err(self) -> float:
        return float(np.mean([l.key_rel_err for l in self.layers]))

    @property
    def mean_value_rel_err(self) -> float:
        return float(np.mean([l.value_rel_err for l in self.layers]))

    @property
    def mean_attn_rel_err(self) -> float:
        return float(np.mean([l.attn_out_rel_err for l in self.layers]))

    @property
    def max_attn_rel_err(self) -> float:
        return float(np.max([l.attn_out_rel_err for l in self.layers]))

    @property
    def mean_attn_cos(self) -> float:
        return float(np.mean([l.attn_out_cos for l in self.layers]))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "group_size": self.group_size,
            "key_rank": self.key_rank,
            "value_rank": self.value_rank,
            "rate": self.rate,
            "mean_key_rel_err": self.mean_key_rel_err,
            "mean_value_rel_err": self.mean_value_rel_err,
            "mean_attn_rel_err": self.mean_attn_rel_err,
            "max_attn_rel_err": self.max_attn_rel_err,
            "mean_attn_cos": self.mean_attn_cos,
            "layers": [vars(l) for l in self.layers],
        }


def _rel_err(approx: np.ndarray, ref: np.ndarray) -> float:
    denom = float(np.linalg.norm(ref))
    num = float(np.linalg.norm(np.asarray(approx) - np.asarray(ref)))
    if denom == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / denom


def _head_cosine(approx: np.ndarray, ref: np.ndarray, head_dim: int) -> float:
    """Mean cosine over (token, head) blocks of the attention output."""
    a = approx.reshape(approx.shape[0], -1, head_dim)
    b = ref.reshape(ref.shape[0], -1, head_dim)
    na = np.linalg.norm(a, axis=2)
    nb = np.linalg.norm(b, axis=2)
    dots = np.einsum("qhd,qhd->qh", a, b)
    both = (na > 0) & (nb > 0)
    cos = np.where(both, dots / np.where(both, na * nb, 1.0), 0.0)
    cos = np.where((na == 0) & (nb == 0), 1.0, cos)
    return float(cos.mean())


def _full_side(dump: CacheDump, layer: int, side: str) -> np.ndarray:
    """Prompt cache plus uncompressed tail, stacked, float64."""
    head = dump.layers[layer].K if side == "key" else dump.layers[layer].V
    parts = [np.asarray(head, dtype=np.float64)]
    if dump.tail:
        t = dump.tail[layer].K if side == "key" else dump.tail[layer].V
        parts.append(np.asarray(t, dtype=np.float64))
    return np.vstack(parts) if len(parts) > 1 else parts[0]


def evaluate(
    dump: CacheDump,
    plans,
    queries: QuerySource | None = None,
) -> list[FidelityReport]:
    """Fidelity of each plan against the original caches.

    Cache errors are measured on the stored (pre-rotation) prompt region;
    attention runs on the full sequence including the tail, with rotary
    embedding applied to keys when the dump captured them pre-rotation.
    """
    queries = queries or QuerySource()
    meta = dump.meta
    total_len = meta.seq_len + dump.tail_len
    positions = np.arange(total_len)
    rope = RopeConfig(head_dim=meta.head_dim, base=meta.rope_base)
    q_per_layer = _layer_queries(dump, queries, total_len)

    def rotated_keys(d: CacheDump, layer: int) -> np.ndarray:
        k = _full_side(d, layer, "key")
        return apply_rope(k, rope, positions) if meta.keys_pre_rope else k

    ref_out = []
    for i in range(meta.num_layers):
        ref_out.append(
            attention_forward(q_per_layer[i], rotated_keys(dump, i),
                              _full_side(dump, i, "value"),
                              meta.num_kv_heads, meta.head_dim)
        )

    reports = []
    for plan in plans:
        cd = plan if isinstance(plan, CompressedDump) else compress(dump, plan)
        rec = reconstruct(cd)
        report = FidelityReport(
            method=cd.plan.method,
            group_size=cd.plan.group_size,
            key_rank=cd.plan.key_rank,
            value_rank=cd.plan.value_rank,
            rate=compression_rate(cd.plan, meta),
        )
        for i in range(meta.num_layers):
            out = attention_forward(q_per_layer[i], rotated_keys(rec, i),
                                    _full_side(rec, i, "value"),
                                    meta.num_kv_heads, meta.head_dim)
            report.layers.append(LayerFidelity(
                layer=i,
                key_rel_err=_rel_err(rec.layers[i].K, dump.layers[i].K),
                value_rel_err=_rel_err(rec.layers[i].V, dump.layers[i].V),
                attn_out_rel_err=_rel_err(out, ref_out[i]),
                attn_out_cos=_head_cosine(out, ref_out[i], meta.head_dim),
            ))
        reports.append(report)
    return reports

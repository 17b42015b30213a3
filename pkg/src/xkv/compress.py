"""Compression engines: grouped cross-layer SVD, per-layer SVD, SLERP merge.

The cross-layer method concatenates the caches of a contiguous layer
group side by side, truncates one SVD of the concatenation, and keeps a
single shared basis (left singular vectors scaled by the singular
values) plus one small reconstruction matrix per layer.  Storage
accounting is exact element counting, so compression rates are
closed-form and auditable against the serialized artifact.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    HeaderMismatch,
    IndivisibleGrouping,
    InvalidConfig,
    IoFailure,
    KeysNotPreRope,
    RanksExceedDims,
    Unachievable,
)
from .kvdump import CacheDump, CacheMeta, LayerCache
from .linalg import DEFAULT_EXACT_LIMIT, svd_auto

METHODS = ("xkv", "single_svd", "slerp", "none")
XKV_MAGIC = b"XKV1"

# guards for the slerp angle: below the floor fall back to normalized
# linear interpolation, above the ceiling cap the angle (antipodal pairs
# have no unique interpolant; the cap keeps the output finite)
SLERP_THETA_FLOOR = 1e-6
SLERP_THETA_CEIL = math.pi - 1e-6


@dataclass(frozen=True)
class LayerGroup:
    indices: tuple[int, ...]


@dataclass(frozen=True)
class CompressionPlan:
    """Fully determines one compression run."""

    method: str
    group_size: int = 1
    key_rank: int = 0
    value_rank: int = 0
    kv_rank_ratio: float = 1.5
    slerp_t: float = 0.5
    slerp_start_layer: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidConfig(f"method must be one of {METHODS}, got {self.method!r}")
        if self.group_size < 1:
            raise InvalidConfig("group_size must be >= 1")
        if self.method in ("xkv", "single_svd") and (self.key_rank < 1 or self.value_rank < 1):
            raise InvalidConfig("SVD methods need key_rank and value_rank >= 1")
        if not 0.0 <= self.slerp_t <= 1.0:
            raise InvalidConfig("slerp_t must be in [0, 1]")
        if self.kv_rank_ratio <= 0:
            raise InvalidConfig("kv_rank_ratio must be positive")


def derive_value_rank(key_rank: int, kv_rank_ratio: float = 1.5) -> int:
    """Value rank from the key rank at the configured ratio (half-up)."""
    return int(math.floor(kv_rank_ratio * key_rank + 0.5))


@dataclass
class CompressedGroup:
    """Shared basis and per-layer reconstruction matrices for one group."""

    side: str
    group: LayerGroup
    A: np.ndarray  # seq_len x rank, left singular vectors scaled by S
    B: list[np.ndarray]  # rank x width, one per layer
    r: int

    def check(self, tol: float = 1e-8) -> None:
        assert self.A.shape[1] == self.r
        assert len(self.B) == len(self.group.indices)
        assert all(b.shape == (self.r, self.B[0].shape[1]) for b in self.B)
        stacked = np.hstack(self.B)
        gram = stacked @ stacked.T
        assert np.abs(gram - np.eye(self.r)).max() <= tol, "B rows not orthonormal"


@dataclass
class SlerpMerged:
    """Per-token great-circle merge of one layer pair (one cache side)."""

    pair: tuple[int, int]
    merged_dir: np.ndarray  # seq_len x width, unit rows (zero rows flagged)
    mag_a: np.ndarray
    mag_b: np.ndarray
    t: float

    @property
    def flagged(self) -> np.ndarray:
        """Tokens whose direction degenerated to the zero row."""
        return np.linalg.norm(self.merged_dir, axis=1) == 0.0

    def check(self, tol: float = 1e-9) -> None:
        norms = np.linalg.norm(self.merged_dir.astype(np.float64), axis=1)
        ok = (np.abs(norms - 1.0) <= tol) | (norms == 0.0)
        assert ok.all(), "merged_dir rows must be unit or flagged zero"


@dataclass
class CompressedDump:
    meta: CacheMeta
    plan: CompressionPlan
    key_groups: list[CompressedGroup] = field(default_factory=list)
    value_groups: list[CompressedGroup] = field(default_factory=list)
    key_merged: list[SlerpMerged] = field(default_factory=list)
    value_merged: list[SlerpMerged] = field(default_factory=list)
    passthrough: list[LayerCache] = field(default_factory=list)
    tail: list[LayerCache] = field(default_factory=list)

    def covered_layers(self) -> list[int]:
        seen: list[int] = []
        for g in self.key_groups:
            seen.extend(g.group.indices)
        for m in self.key_merged:
            seen.extend(m.pair)
        seen.extend(layer.layer_index for layer in self.passthrough)
        return sorted(seen)


def stride_groups(num_layers: int, group_size: int) -> list[LayerGroup]:
    """Contiguous strides of ``group_size`` adjacent layers covering all layers."""
    if group_size < 1:
        raise InvalidConfig("group size must be >= 1")
    if num_layers % group_size:
        raise IndivisibleGrouping(
            f"group size {group_size} does not divide {num_layers} layers"
        )
    return [
        LayerGroup(indices=tuple(range(k, k + group_size)))
        for k in range(0, num_layers, group_size)
    ]


def _grouped_svd_compress(dump: CacheDump, plan: CompressionPlan,
                          group_size: int,
                          exact_limit: int = DEFAULT_EXACT_LIMIT) -> CompressedDump:
    meta = dump.meta
    if not meta.keys_pre_rope:
        raise KeysNotPreRope(
            "SVD key compression requires pre-RoPE keys; this dump captured "
            "keys after rotary embedding"
        )
    groups = stride_groups(meta.num_layers, group_size)
    max_rank = min(meta.seq_len, group_size * meta.width)
    for side, rank in (("key", plan.key_rank), ("value", plan.value_rank)):
        if rank > max_rank:
            raise RanksExceedDims(
                f"{side} rank {rank} exceeds min(seq_len, G*d) = {max_rank}"
            )

    out = CompressedDump(meta=meta, plan=plan, tail=list(dump.tail))
    d = meta.width
    for gi, group in enumerate(groups):
        for side, rank, target in (
            ("key", plan.key_rank, out.key_groups),
            ("value", plan.value_rank, out.value_groups),
        ):
            block = np.hstack([
                (dump.layers[i].K if side == "key" else dump.layers[i].V)
                for i in group.indices
            ]).astype(np.float64)
            fac = svd_auto(block, rank, exact_limit=exact_limit, seed=gi)
            shared = fac.U * fac.S
            per_layer = [fac.Vt[:, j * d : (j + 1) * d].copy()
                         for j in range(len(group.indices))]
            target.append(CompressedGroup(side=side, group=group, A=shared,
                                          B=per_layer, r=rank))
    return out


def xkv_compress(dump: CacheDump, plan: CompressionPlan) -> CompressedDump:
    """Cross-layer SVD compression over stride groups of adjacent layers."""
    if plan.method != "xkv":
        raise InvalidConfig(f"plan method is {plan.method!r}, expected 'xkv'")
    return _grouped_svd_compress(dump, plan, plan.group_size)


def single_svd_compress(dump: CacheDump, plan: CompressionPlan) -> CompressedDump:
    """Per-layer SVD: the group-size-1 special case of the cross-layer method."""
    if plan.method != "single_svd":
        raise InvalidConfig(f"plan method is {plan.method!r}, expected 'single_svd'")
    return _grouped_svd_compress(dump, plan, 1)


def resolve_slerp_start(plan: CompressionPlan, num_layers: int) -> int:
    """Start of the merged region; defaults to the middle, even-sized."""
    if plan.slerp_start_layer is None:
        start = num_layers // 2
        if (num_layers - start) % 2:
            start += 1
        return start
    start = plan.slerp_start_layer
    if not 0 <= start <= num_layers:
        raise InvalidConfig(f"slerp_start_layer {start} out of [0, {num_layers}]")
    if (num_layers - start) % 2:
        raise InvalidConfig("merged region must have an even number of layers")
    return start


def _slerp_pair(xa: np.ndarray, xb: np.ndarray, t: float) -> SlerpMerged:
    xa = xa.astype(np.float64)
    xb = xb.astype(np.float64)
    mag_a = np.linalg.norm(xa, axis=1)
    mag_b = np.linalg.norm(xb, axis=1)
    ok = (mag_a > 0) & (mag_b > 0)

    ua = np.zeros_like(xa)
    ub = np.zeros_like(xb)
    ua[ok] = xa[ok] / mag_a[ok, None]
    ub[ok] = xb[ok] / mag_b[ok, None]

    dot = np.clip(np.einsum("td,td->t", ua, ub), -1.0, 1.0)
    theta = np.arccos(dot)

    direction = np.zeros_like(xa)
    near = ok & (theta < SLERP_THETA_FLOOR)
    if near.any():
        direction[near] = (1.0 - t) * ua[near] + t * ub[near]
    far = ok & ~near
    if far.any():
        th = np.minimum(theta[far], SLERP_THETA_CEIL)
        s = np.sin(th)
        direction[far] = (
            (np.sin((1.0 - t) * th) / s)[:, None] * ua[far]
            + (np.sin(t * th) / s)[:, None] * ub[far]
        )
    norms = np.linalg.norm(direction, axis=1)
    unit = norms > 1e-9
    direction[unit] /= norms[unit, None]
    direction[~unit] = 0.0
    return SlerpMerged(pair=(-1, -1), merged_dir=direction, mag_a=mag_a,
                       mag_b=mag_b, t=t)


def slerp_merge(dump: CacheDump, plan: CompressionPlan) -> CompressedDump:
    """Merge adjacent layer pairs from the middle onward via spherical
    interpolation of per-token directions, keeping per-layer magnitudes."""
    if plan.method != "slerp":
        raise InvalidConfig(f"plan method is {plan.method!r}, expected 'slerp'")
    meta = dump.meta
    start = resolve_slerp_start(plan, meta.num_layers)
    out = CompressedDump(meta=meta, plan=plan, tail=list(dump.tail),
                         passthrough=[dump.layers[i] for i in range(start)])
    for a in range(start, meta.num_layers, 2):
        b = a + 1
        for side, target in (("key", out.key_merged), ("value", out.value_merged)):
            xa = dump.layers[a].K if side == "key" else dump.layers[a].V
            xb = dump.layers[b].K if side == "key" else dump.layers[b].V
            merged = _slerp_pair(xa, xb, plan.slerp_t)
            merged.pair = (a, b)
            target.append(merged)
    return out


def compress(dump: CacheDump, plan: CompressionPlan) -> CompressedDump:
    """Dispatch on the plan's method."""
    if plan.method == "xkv":
        return xkv_compress(dump, plan)
    if plan.method == "single_svd":
        return single_svd_compress(dump, plan)
    if plan.method == "slerp":
        return slerp_merge(dump, plan)
    return CompressedDump(meta=dump.meta, plan=plan,
                          passthrough=list(dump.layers), tail=list(dump.tail))


def reconstruct(cd: CompressedDump) -> CacheDump:
    """Rebuild a full dump: A @ B per layer for SVD methods, magnitude
    times merged direction for slerp, verbatim passthrough and tail."""
    meta = cd.meta
    ks: dict[int, np.ndarray] = {}
    vs: dict[int, np.ndarray] = {}
    for groups, store in ((cd.key_groups, ks), (cd.value_groups, vs)):
        for g in groups:
            for j, layer_idx in enumerate(g.group.indices):
                store[layer_idx] = g.A @ g.B[j]
    for merged_list, store in ((cd.key_merged, ks), (cd.value_merged, vs)):
        for m in merged_list:
            a, b = m.pair
            store[a] = m.mag_a[:, None] * m.merged_dir
            store[b] = m.mag_b[:, None] * m.merged_dir
    for layer in cd.passthrough:
        ks[layer.layer_index] = layer.K
        vs[layer.layer_index] = layer.V
    layers = [LayerCache(i, ks[i], vs[i]) for i in range(meta.num_layers)]
    return CacheDump(meta=meta, layers=layers, tail=list(cd.tail))


# --- storage accounting ---------------------------------------------------

def plan_storage_elements(plan: CompressionPlan, meta: CacheMeta,
                          context_len: int | None = None) -> int:
    """Closed-form stored element count for the compressed prompt region."""
    seq = context_len if context_len is not None else meta.seq_len
    n, d = meta.num_layers, meta.width
    if plan.method == "none":
        return 2 * n * seq * d
    if plan.method in ("xkv", "single_svd"):
        g = plan.group_size if plan.method == "xkv" else 1
        if n % g:
            raise IndivisibleGrouping(f"group size {g} does not divide {n} layers")
        num_groups = n // g
        per_side = lambda r: num_groups * (seq * r + r * g * d)
        return per_side(plan.key_rank) + per_side(plan.value_rank)
    start = resolve_slerp_start(plan, n)
    pairs = (n - start) // 2
    per_side = start * seq * d + pairs * (seq * d + 2 * seq)
    return 2 * per_side


def compression_rate(plan: CompressionPlan, meta: CacheMeta,
                     context_len: int | None = None) -> float:
    """Original over compressed element count, exact."""
    seq = context_len if context_len is not None else meta.seq_len
    original = 2 * meta.num_layers * seq * meta.width
    return original / plan_storage_elements(plan, meta, context_len)


def stored_elements(cd: CompressedDump) -> int:
    """Element count actually held by a compressed artifact (prompt region)."""
    total = 0
    for g in cd.key_groups + cd.value_groups:
        total += g.A.size + sum(b.size for b in g.B)
    for m in cd.key_merged + cd.value_merged:
        total += m.merged_dir.size + m.mag_a.size + m.mag_b.size
    for layer in cd.passthrough:
        total += layer.K.size + layer.V.size
    return total


def rank_for_rate(target_rate: float, meta: CacheMeta, group_size: int,
                  kv_rank_ratio: float = 1.5,
                  context_len: int | None = None) -> tuple[int, int]:
    """Largest (key_rank, value_rank) pair still achieving the target rate.

    The value rank tracks the key rank at the configured ratio; the rate
    is strictly decreasing in the key rank, so the answer is unique and
    the next larger key rank violates the target.
    """
    if target_rate <= 1.0:
        raise Unachievable(f"target rate {target_rate} must exceed 1.0")
    seq = context_len if context_len is not None else meta.seq_len
    max_rank = min(seq, group_size * meta.width)

    def rate(rk: int) -> float | None:
        rv = derive_value_rank(rk, kv_rank_ratio)
        if rk > max_rank or rv > max_rank:
            return None
        plan = CompressionPlan(method="xkv" if group_size > 1 else "single_svd",
                               group_size=group_size, key_rank=rk, value_rank=rv,
                               kv_rank_ratio=kv_rank_ratio)
        return compression_rate(plan, meta, context_len)

    first = rate(1)
    if first is None or first < target_rate:
        raise Unachievable(
            f"target rate {target_rate} exceeds the rate {first} at key rank 1"
        )
    lo, hi = 1, max_rank
    while rate(hi) is None:
        hi -= 1
    if rate(hi) >= target_rate:
        best = hi
    else:
        best = lo
        while lo <= hi:
            mid = (lo + hi) // 2
            r = rate(mid)
            if r is not None and r >= target_rate:
                best = mid
                lo = mid + 1
            else:
                hi = mid - 1
    return best, derive_value_rank(best, kv_rank_ratio)


# --- XKV1 serialization ---------------------------------------------------

def _meta_dict(meta: CacheMeta) -> dict:
    return {
        "model_id": meta.model_id,
        "num_layers": meta.num_layers,
        "num_kv_heads": meta.num_kv_heads,
        "head_dim": meta.head_dim,
        "seq_len": meta.seq_len,
        "dtype": meta.dtype,
        "keys_pre_rope": meta.keys_pre_rope,
        "rope_base": meta.rope_base,
        "layout": meta.layout,
    }


def _write_tensor(fh, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def write_compressed(cd: CompressedDump, path) -> None:
    """Serialize: XKV1 magic, JSON header, then f32 factors in group order
    (shared basis then per-layer matrices), keys first, values, tail."""
    tail_len = cd.tail[0].K.shape[0] if cd.tail else 0
    header = {
        "meta": _meta_dict(cd.meta),
        "plan": asdict(cd.plan),
        "tail_len": tail_len,
        "key_groups": [{"indices": list(g.group.indices), "rank": g.r}
                       for g in cd.key_groups],
        "value_groups": [{"indices": list(g.group.indices), "rank": g.r}
                         for g in cd.value_groups],
        "key_merged": [{"pair": list(m.pair), "t": m.t} for m in cd.key_merged],
        "value_merged": [{"pair": list(m.pair), "t": m.t} for m in cd.value_merged],
        "passthrough": [layer.layer_index for layer in cd.passthrough],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(XKV_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for groups in (cd.key_groups, cd.value_groups):
                for g in groups:
                    _write_tensor(fh, g.A)
                    for b in g.B:
                        _write_tensor(fh, b)
            for merged_list in (cd.key_merged, cd.value_merged):
                for m in merged_list:
                    _write_tensor(fh, m.merged_dir)
                    _write_tensor(fh, m.mag_a)
                    _write_tensor(fh, m.mag_b)
            for layer in cd.passthrough:
                _write_tensor(fh, layer.K)
            for layer in cd.passthrough:
                _write_tensor(fh, layer.V)
            for layer in cd.tail:
                _write_tensor(fh, layer.K)
                _write_tensor(fh, layer.V)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_compressed(path) -> CompressedDump:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(raw) < 8 or raw[:4] != XKV_MAGIC:
        raise BadMagic(f"{path} does not start with {XKV_MAGIC!r}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    try:
        hdr = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
        meta = CacheMeta(**hdr["meta"])
        plan = CompressionPlan(**hdr["plan"])
        tail_len = int(hdr["tail_len"])
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise HeaderMismatch(f"malformed header: {exc}") from exc

    seq, d = meta.seq_len, meta.width
    pos = 8 + hlen

    def take(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal pos
        count = int(np.prod(shape))
        if pos + 4 * count > len(raw):
            raise HeaderMismatch("file shorter than its header implies")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
        pos += 4 * count
        return arr.reshape(shape).astype(np.float32)

    cd = CompressedDump(meta=meta, plan=plan)
    for name, target in (("key_groups", cd.key_groups), ("value_groups", cd.value_groups)):
        for entry in hdr[name]:
            indices = tuple(entry["indices"])
            r = int(entry["rank"])
            A = take((seq, r)).astype(np.float64)
            B = [take((r, d)).astype(np.float64) for _ in indices]
            target.append(CompressedGroup(side=name.split("_")[0],
                                          group=LayerGroup(indices=indices),
                                          A=A, B=B, r=r))
    for name, target in (("key_merged", cd.key_merged), ("value_merged", cd.value_merged)):
        for entry in hdr[name]:
            direction = take((seq, d)).astype(np.float64)
            mag_a = take((seq,)).astype(np.float64)
            mag_b = take((seq,)).astype(np.float64)
            target.append(SlerpMerged(pair=tuple(entry["pair"]), merged_dir=direction,
                                      mag_a=mag_a, mag_b=mag_b, t=float(entry["t"])))
    pass_idx = list(hdr["passthrough"])
    pass_k = [take((seq, d)) for _ in pass_idx]
    pass_v = [take((seq, d)) for _ in pass_idx]
    cd.passthrough = [LayerCache(i, k, v) for i, k, v in zip(pass_idx, pass_k, pass_v)]
    for i in range(meta.num_layers if tail_len else 0):
        cd.tail.append(LayerCache(i, take((tail_len, d)), take((tail_len, d))))
    if pos != len(raw):
        raise HeaderMismatch(f"payload is {len(raw) - 8 - hlen} bytes, "
                             f"header implies {pos - 8 - hlen}")
    return cd

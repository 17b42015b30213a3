"""Cross-layer similarity and rank diagnostics.

Three numerically independent CKA paths are kept side by side: the
literal centered-Gram formula (small token counts only), a feature-space
reformulation that scales to long sequences, and a singular-vector
overlap expansion.  They must agree to tight tolerances; tests use the
Gram path as the oracle for the other two.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GramTooLarge, InvalidConfig
from .kvdump import CacheDump
from .linalg import (
    DEFAULT_EXACT_LIMIT,
    center_rows,
    singular_values,
    svd_randomized,
)

DEFAULT_GRAM_CAP = 4096

SIDES = ("key", "value")


def _side_matrix(dump: CacheDump, layer: int, side: str) -> np.ndarray:
    if side not in SIDES:
        raise InvalidConfig(f"side must be 'key' or 'value', got {side!r}")
    layer_cache = dump.layers[layer]
    return layer_cache.K if side == "key" else layer_cache.V


@dataclass
class SimilarityMatrix:
    kind: str  # "cosine" | "cka"
    cache_side: str  # "key" | "value"
    values: np.ndarray

    def check(self, tol: float = 1e-9) -> None:
        v = self.values
        assert v.ndim == 2 and v.shape[0] == v.shape[1]
        assert np.abs(v - v.T).max() <= tol, "not symmetric"
        if self.kind == "cka":
            assert np.abs(np.diag(v) - 1.0).max() <= tol, "diagonal not 1"
            assert v.min() >= 0.0 and v.max() <= 1.0 + tol
        else:
            # zero-norm token rows pull self-similarity below 1
            assert np.diag(v).min() >= -tol and np.diag(v).max() <= 1.0 + tol
            assert v.min() >= -1.0 - tol and v.max() <= 1.0 + tol


@dataclass
class RankCurve:
    """Average rank/(G*d) needed per group size to hit an energy fraction."""

    group_sizes: list[int]
    key_ratio: list[float]
    value_ratio: list[float]
    energy_fraction: float = 0.95
    # group sizes that did not divide the layer count, with the number of
    # trailing layers that had to be dropped
    dropped_layers: dict[int, int] = field(default_factory=dict)


def cosine_similarity_matrix(dump: CacheDump, side: str) -> SimilarityMatrix:
    """Average per-token cosine similarity between every pair of layers.

    Token rows with zero norm contribute 0 to the average rather than NaN;
    real dumps contain padding rows and the result must stay finite.
    """
    mats = [np.asarray(_side_matrix(dump, i, side), dtype=np.float64)
            for i in range(dump.meta.num_layers)]
    n = len(mats)
    seq_len = dump.meta.seq_len
    norms = [np.linalg.norm(m, axis=1) for m in mats]
    out = np.eye(n)
    for a in range(n):
        for b in range(a, n):
            dots = np.einsum("td,td->t", mats[a], mats[b])
            denom = norms[a] * norms[b]
            ok = denom > 0
            val = float(np.sum(dots[ok] / denom[ok]) / seq_len)
            out[a, b] = out[b, a] = val
    return SimilarityMatrix(kind="cosine", cache_side=side, values=out)


def _safe_ratio(num: float, den: float) -> float:
    if den <= 0.0:
        return 0.0
    return max(num / den, 0.0)


def cka_gram(X1: np.ndarray, X2: np.ndarray, max_rows: int = DEFAULT_GRAM_CAP) -> float:
    """CKA via explicitly materialized centered Gram matrices.

    The n x n Grams make this the small-n oracle path; it refuses to run
    past ``max_rows`` tokens.
    """
    X1 = np.asarray(X1, dtype=np.float64)
    X2 = np.asarray(X2, dtype=np.float64)
    n = X1.shape[0]
    if X2.shape[0] != n:
        raise InvalidConfig("inputs must have the same number of rows")
    if n > max_rows:
        raise GramTooLarge(f"{n} rows exceeds the Gram cap of {max_rows}")
    H = np.eye(n) - np.full((n, n), 1.0 / n)
    G1 = H @ (X1 @ X1.T) @ H
    G2 = H @ (X2 @ X2.T) @ H
    cross = float(np.sum(G1 * G2.T))  # trace(G1 @ G2)
    n1 = float(np.sum(G1 * G1.T))
    n2 = float(np.sum(G2 * G2.T))
    return _safe_ratio(cross, float(np.sqrt(n1 * n2)))


def cka_feature(X1: np.ndarray, X2: np.ndarray) -> float:
    """CKA via d x d' feature cross-products; works at 64k-token scale.

    Identical in exact arithmetic to the Gram path:
    trace(G1 G2) = ||center(X1)^T center(X2)||_F^2.
    """
    Xc1 = center_rows(X1)
    Xc2 = center_rows(X2)
    if Xc1.shape[0] != Xc2.shape[0]:
        raise InvalidConfig("inputs must have the same number of rows")
    cross = float(np.linalg.norm(Xc1.T @ Xc2) ** 2)
    n1 = float(np.linalg.norm(Xc1.T @ Xc1) ** 2)
    n2 = float(np.linalg.norm(Xc2.T @ Xc2) ** 2)
    return _safe_ratio(cross, float(np.sqrt(n1 * n2)))


def cka_svd_overlap(X1: np.ndarray, X2: np.ndarray) -> float:
    """CKA as squared-singular-value-weighted left singular vector overlap.

    sum_ij s1_i^2 s2_j^2 (u1_i . u2_j)^2 / sqrt(sum s1^4 * sum s2^4) on the
    centered inputs; high CKA means the dominant left singular vectors of
    the two matrices align.
    """
    Xc1 = center_rows(X1)
    Xc2 = center_rows(X2)
    if Xc1.shape[0] != Xc2.shape[0]:
        raise InvalidConfig("inputs must have the same number of rows")
    U1, S1, _ = np.linalg.svd(Xc1, full_matrices=False)
    U2, S2, _ = np.linalg.svd(Xc2, full_matrices=False)
    overlap = (U1.T @ U2) ** 2
    num = float((S1**2) @ overlap @ (S2**2))
    den = float(np.sqrt(np.sum(S1**4) * np.sum(S2**4)))
    return _safe_ratio(num, den)


def cka_matrix(dump: CacheDump, side: str) -> SimilarityMatrix:
    """Pairwise feature-path CKA over all layers, mirrored to be symmetric."""
    mats = [np.asarray(_side_matrix(dump, i, side), dtype=np.float64)
            for i in range(dump.meta.num_layers)]
    centered = [center_rows(m) for m in mats]
    self_norm = [float(np.linalg.norm(c.T @ c) ** 2) for c in centered]
    n = len(mats)
    out = np.zeros((n, n))
    for a in range(n):
        for b in range(a, n):
            cross = float(np.linalg.norm(centered[a].T @ centered[b]) ** 2)
            out[a, b] = out[b, a] = _safe_ratio(
                cross, float(np.sqrt(self_norm[a] * self_norm[b]))
            )
    return SimilarityMatrix(kind="cka", cache_side=side, values=out)


def _energy_rank_against_total(spectrum: np.ndarray, total_energy: float,
                               fraction: float) -> int | None:
    cumulative = np.cumsum(np.asarray(spectrum, dtype=np.float64) ** 2)
    target = fraction * total_energy
    if target <= 0:
        return 0
    idx = np.searchsorted(cumulative, target, side="left")
    return int(idx + 1) if idx < cumulative.size else None


def concat_energy_rank(X: np.ndarray, fraction: float,
                       exact_limit: int = DEFAULT_EXACT_LIMIT) -> int:
    """Rank capturing ``fraction`` of the squared spectrum of X.

    Exact spectrum when the matrix is small enough; otherwise a growing
    randomized partial spectrum checked against the exact total Frobenius
    energy, so the answer is still correct once the rank is captured.
    """
    X = np.asarray(X, dtype=np.float64)
    small = min(X.shape)
    if X.size <= exact_limit or small <= 24:
        s = singular_values(X)
        k = _energy_rank_against_total(s, float(np.sum(s**2)), fraction)
        return k if k is not None else s.size
    total = float(np.linalg.norm(X) ** 2)
    cap = small - 8  # leave room for the range-finder oversampling
    r = min(256, cap)
    while True:
        part = svd_randomized(X, r).S
        k = _energy_rank_against_total(part, total, fraction)
        if k is not None:
            return k
        if r >= cap:
            s = singular_values(X)
            k = _energy_rank_against_total(s, float(np.sum(s**2)), fraction)
            return k if k is not None else s.size
        r = min(2 * r, cap)


def rank_curve(dump: CacheDump, group_sizes: list[int],
               energy_fraction: float = 0.95) -> RankCurve:
    """Required-rank ratio versus group size, averaged across groups.

    For each group size the member layers are horizontally concatenated
    and the rank reaching the energy fraction is divided by the total
    width G*d.  Group sizes that do not divide the layer count drop the
    trailing partial group and record how many layers were skipped.
    """
    n = dump.meta.num_layers
    curve = RankCurve(group_sizes=list(group_sizes), key_ratio=[], value_ratio=[],
                      energy_fraction=energy_fraction)
    for g in group_sizes:
        if g < 1:
            raise InvalidConfig(f"group size must be >= 1, got {g}")
        usable = n - n % g
        if usable != n:
            curve.dropped_layers[g] = n - usable
        for side, ratios in (("key", curve.key_ratio), ("value", curve.value_ratio)):
            per_group = []
            for start in range(0, usable, g):
                block = np.hstack([
                    _side_matrix(dump, start + j, side) for j in range(g)
                ]).astype(np.float64)
                rank = concat_energy_rank(block, energy_fraction)
                per_group.append(rank / block.shape[1])
            ratios.append(float(np.mean(per_group)))
    return curve

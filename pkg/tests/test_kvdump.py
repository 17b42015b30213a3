import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xkv import (
    BadMagic,
    CacheDump,
    CacheMeta,
    HeaderMismatch,
    InvalidConfig,
    LayerCache,
    NonFinite,
    SynthConfig,
    UnsupportedDtype,
    cka_feature,
    quantize_like,
    read_dump,
    synth_dump,
    write_dump,
)
from xkv.kvdump import MAGIC, expected_payload_bytes

from factories import random_dump


def test_roundtrip_f32_is_bitwise(rng, tmp_path):
    dump = random_dump(rng, tail_len=5, with_queries=True)
    path = tmp_path / "d.kvd"
    write_dump(dump, path)
    back = read_dump(path)
    assert back.meta == dump.meta
    for a, b in zip(dump.layers, back.layers):
        assert np.array_equal(a.K, b.K) and np.array_equal(a.V, b.V)
    for a, b in zip(dump.tail, back.tail):
        assert np.array_equal(a.K, b.K) and np.array_equal(a.V, b.V)
    for a, b in zip(dump.queries, back.queries):
        assert np.array_equal(a, b)


@pytest.mark.parametrize("dtype", ["f16", "bf16"])
def test_roundtrip_lossy_dtypes_match_quantizer(rng, tmp_path, dtype):
    dump = random_dump(rng, dtype=dtype)
    path = tmp_path / "d.kvd"
    write_dump(dump, path)
    back = read_dump(path)
    for a, b in zip(dump.layers, back.layers):
        assert np.array_equal(quantize_like(a.K, dtype), b.K)
        assert np.array_equal(quantize_like(a.V, dtype), b.V)


def test_payload_length_is_exact(rng, tmp_path):
    dump = random_dump(rng, num_layers=3, seq_len=10, head_dim=4, tail_len=2)
    path = tmp_path / "d.kvd"
    write_dump(dump, path)
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<I", raw[4:8])
    assert len(raw) - 8 - hlen == expected_payload_bytes(dump.meta, tail_len=2)


def test_header_is_sorted_json_with_exact_keys(rng, tmp_path):
    dump = random_dump(rng)
    path = tmp_path / "d.kvd"
    write_dump(dump, path)
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<I", raw[4:8])
    hdr = json.loads(raw[8 : 8 + hlen])
    assert set(hdr) == {
        "model_id", "num_layers", "num_kv_heads", "head_dim", "seq_len",
        "dtype", "keys_pre_rope", "rope_base", "layout", "tail_len",
    }


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.kvd"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(BadMagic):
        read_dump(path)


def test_truncated_payload_rejected(rng, tmp_path):
    dump = random_dump(rng)
    path = tmp_path / "d.kvd"
    write_dump(dump, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(HeaderMismatch):
        read_dump(path)


def test_trailing_garbage_rejected(rng, tmp_path):
    dump = random_dump(rng)
    path = tmp_path / "d.kvd"
    write_dump(dump, path)
    path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
    with pytest.raises(HeaderMismatch):
        read_dump(path)


def test_unknown_dtype_rejected(rng, tmp_path):
    dump = random_dump(rng)
    path = tmp_path / "d.kvd"
    write_dump(dump, path)
    raw = bytearray(path.read_bytes())
    (hlen,) = struct.unpack("<I", raw[4:8])
    hdr = json.loads(bytes(raw[8 : 8 + hlen]))
    hdr["dtype"] = "f8"
    blob = json.dumps(hdr, sort_keys=True).encode()
    path.write_bytes(MAGIC + struct.pack("<I", len(blob)) + blob + bytes(raw[8 + hlen :]))
    with pytest.raises((UnsupportedDtype, HeaderMismatch)):
        read_dump(path)


def test_nan_rejected_at_construction():
    meta = CacheMeta(model_id="m", num_layers=1, num_kv_heads=1, head_dim=4,
                     seq_len=2)
    bad = np.full((2, 4), np.nan, dtype=np.float32)
    good = np.zeros((2, 4), dtype=np.float32)
    with pytest.raises(NonFinite):
        CacheDump(meta=meta, layers=[LayerCache(0, bad, good)])


def test_shape_mismatch_rejected():
    meta = CacheMeta(model_id="m", num_layers=1, num_kv_heads=1, head_dim=4,
                     seq_len=3)
    with pytest.raises(InvalidConfig):
        CacheDump(meta=meta, layers=[LayerCache(0, np.zeros((2, 4)), np.zeros((2, 4)))])


def test_bf16_rounds_to_nearest_even():
    # 1 + 2^-8 sits exactly between two bf16 values (1 and 1 + 2^-7);
    # round-to-nearest-even picks the even mantissa, i.e. exactly 1
    x = np.array([1.0 + 2.0**-8], dtype=np.float32)
    assert quantize_like(x, "bf16")[0] == 1.0
    # just above the midpoint must round up
    y = np.array([1.0 + 2.0**-8 + 2.0**-16], dtype=np.float32)
    assert quantize_like(y, "bf16")[0] == np.float32(1.0 + 2.0**-7)


@given(st.lists(st.floats(min_value=-1e6, max_value=1e6, width=32),
                min_size=1, max_size=32))
@settings(deadline=None)
def test_bf16_is_nearest_representable(vals):
    x = np.array(vals, dtype=np.float32)
    q = quantize_like(x, "bf16")
    # candidates: truncation and its upper neighbour
    bits = x.view(np.uint32) & np.uint32(0xFFFF0000)
    lo = bits.view(np.float32)
    hi = (bits + np.uint32(0x10000)).view(np.float32)
    err_q = np.abs(q.astype(np.float64) - x.astype(np.float64))
    err_lo = np.abs(lo.astype(np.float64) - x.astype(np.float64))
    err_hi = np.abs(hi.astype(np.float64) - x.astype(np.float64))
    assert (err_q <= err_lo + 1e-30).all() and (err_q <= err_hi + 1e-30).all()


@given(
    num_layers=st.integers(1, 4),
    seq_len=st.integers(1, 12),
    head_dim=st.sampled_from([2, 4, 8]),
    heads=st.integers(1, 3),
    dtype=st.sampled_from(["f32", "f16", "bf16"]),
    tail_len=st.integers(0, 4),
    seed=st.integers(0, 2**16),
)
@settings(deadline=None, max_examples=40)
def test_roundtrip_property(num_layers, seq_len, head_dim, heads, dtype,
                            tail_len, seed, tmp_path_factory):
    rng = np.random.default_rng(seed)
    dump = random_dump(rng, num_layers=num_layers, seq_len=seq_len,
                       num_kv_heads=heads, head_dim=head_dim, dtype=dtype,
                       tail_len=tail_len)
    path = tmp_path_factory.mktemp("rt") / "d.kvd"
    write_dump(dump, path)
    back = read_dump(path)
    assert back.meta == dump.meta
    assert back.tail_len == dump.tail_len
    for a, b in zip(dump.layers, back.layers):
        assert np.array_equal(quantize_like(a.K, dtype), b.K)
        assert np.array_equal(quantize_like(a.V, dtype), b.V)


def test_synth_deterministic_per_seed():
    cfg = SynthConfig(num_layers=3, seq_len=32, head_dim=16, seed=7)
    a, b = synth_dump(cfg), synth_dump(cfg)
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.K, lb.K) and np.array_equal(la.V, lb.V)
    c = synth_dump(SynthConfig(num_layers=3, seq_len=32, head_dim=16, seed=8))
    assert not np.array_equal(a.layers[0].K, c.layers[0].K)


def test_synth_full_alignment_drives_cka_to_one():
    cfg = SynthConfig(num_layers=4, seq_len=96, head_dim=32, shared_rank=6,
                      private_rank=0, noise=0.0, alignment=1.0, seed=5)
    dump = synth_dump(cfg)
    for i in range(1, 4):
        cka = cka_feature(dump.layers[0].K, dump.layers[i].K)
        assert abs(cka - 1.0) <= 1e-6


def test_synth_zero_alignment_keeps_layers_dissimilar():
    cfg = SynthConfig(num_layers=4, seq_len=96, head_dim=32, shared_rank=0,
                      private_rank=6, noise=0.0, alignment=0.0, seed=5)
    dump = synth_dump(cfg)
    assert cka_feature(dump.layers[0].K, dump.layers[1].K) < 0.5


def test_synth_validation():
    with pytest.raises(InvalidConfig):
        SynthConfig(alignment=1.5)
    with pytest.raises(InvalidConfig):
        SynthConfig(noise=-0.1)
    with pytest.raises(InvalidConfig):
        SynthConfig(seq_len=4, head_dim=4, num_kv_heads=1, shared_rank=3,
                    private_rank=3)


def test_synth_tail_rows_extend_the_same_process():
    cfg = SynthConfig(num_layers=2, seq_len=20, head_dim=16, tail_len=4, seed=3)
    dump = synth_dump(cfg)
    assert dump.tail_len == 4
    assert dump.layers[0].K.shape == (20, 16)
    assert dump.tail[0].K.shape == (4, 16)

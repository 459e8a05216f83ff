"""Wire format and uplink strategies: CSR round trips, hand-packed byte
oracle, corruption handling, strategy payload semantics and byte accounting."""

import math
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zerofl.codec import (
    BadMagicError,
    CodecError,
    CorruptPayloadError,
    CsrLayerPayload,
    ModelUpdate,
    Strategy,
    StructureMismatchError,
    TensorPayload,
    TruncatedUpdateError,
    build_update,
    csr_decode,
    csr_encode,
    csr_from_mask,
    deserialize_update,
    savings_factor,
    serialize_update,
)
from zerofl.model import init_mlp
from zerofl.sparsify import keep_fraction_for

GOLDEN = Path(__file__).parent / "golden" / "update_small.zfu"


def toy_models(seed=0, dims=(4, 6, 6, 3)):
    w_t = init_mlp(dims[0], dims[-1], hidden=dims[1:-1], rng=np.random.default_rng(seed))
    bumped = {k: v + np.float32(0.01) * np.arange(v.size, dtype=np.float32).reshape(v.shape)
              for k, v in w_t.tensor_items()}
    w_e = w_t.with_tensors(bumped)
    return w_t, w_e


# ---------------------------------------------------------------- CSR core


def test_csr_zero_tensor():
    p = csr_encode(np.zeros((3, 4), dtype=np.float32))
    assert p.nnz == 0
    assert list(p.row_ptr) == [0, 0, 0, 0]
    assert not csr_decode(p).any()


def test_csr_fully_dense():
    t = np.arange(1, 13, dtype=np.float32).reshape(3, 4)
    p = csr_encode(t)
    assert p.nnz == 12
    assert np.array_equal(csr_decode(p), t)


def test_csr_random_roundtrip_bitwise():
    rng = np.random.default_rng(1)
    t = rng.standard_normal((8, 16)).astype(np.float32)
    t[rng.random((8, 16)) > 0.3] = 0.0  # ~30% dense
    back = csr_decode(csr_encode(t))
    assert back.tobytes() == t.tobytes()


def test_csr_views_leading_axis_as_rows():
    t = np.zeros((4, 2, 3), dtype=np.float32)
    t[2, 1, 2] = 5.0
    p = csr_encode(t)
    assert (p.rows, p.cols) == (4, 6)
    assert list(p.col_idx) == [5]
    assert np.array_equal(csr_decode(p).reshape(4, 2, 3), t)


def test_csr_explicit_zeros_preserved():
    p = csr_from_mask((2, 3), np.array([1, 4]), np.array([0.0, 0.0]))
    assert p.nnz == 2  # selected positions survive even with 0.0 values
    assert not csr_decode(p).any()


def test_csr_invariant_violations():
    good = csr_encode(np.arange(6, dtype=np.float32).reshape(2, 3))
    bad = CsrLayerPayload(2, 3, good.row_ptr.copy(), good.col_idx.copy(), good.values.copy())
    bad.row_ptr[0] = 1
    with pytest.raises(CorruptPayloadError, match="row_ptr"):
        bad.validate()
    bad2 = CsrLayerPayload(2, 3, good.row_ptr, np.array([0, 9, 1, 2, 0], np.uint32)[: good.nnz],
                           good.values)
    with pytest.raises(CorruptPayloadError):
        bad2.validate()


# ------------------------------------------------------------- wire format


def test_wire_bytes_match_hand_packed_oracle():
    """Byte-for-byte check of the format against struct.pack built by hand."""
    dense = np.array([1.5, -2.0], dtype=np.float32)
    csr = csr_from_mask((2, 2), np.array([1, 2]), np.array([3.0, 0.25], np.float32))
    u = ModelUpdate(Strategy.DIFF_TOPK_WEIGHTS, 0.5, 0.25, 7,
                    [TensorPayload("a.b", (2,), dense=dense),
                     TensorPayload("c", (2, 2), csr=csr)])
    expected = b"ZFU1"
    expected += struct.pack("<B", 2)  # strategy byte
    expected += struct.pack("<f", 0.5) + struct.pack("<f", 0.25)
    expected += struct.pack("<I", 7) + struct.pack("<I", 2)
    expected += struct.pack("<H", 3) + b"a.b" + struct.pack("<BB", 0, 1) + struct.pack("<I", 2)
    expected += struct.pack("<ff", 1.5, -2.0)
    expected += struct.pack("<H", 1) + b"c" + struct.pack("<BB", 1, 2)
    expected += struct.pack("<II", 2, 2)
    expected += struct.pack("<I", 2)  # nnz
    expected += struct.pack("<III", 0, 1, 2)  # row_ptr
    expected += struct.pack("<II", 1, 0)  # col_idx
    expected += struct.pack("<ff", 3.0, 0.25)
    assert serialize_update(u) == expected


@st.composite
def updates(draw):
    strategy = draw(st.sampled_from(list(Strategy)))
    n_layers = draw(st.integers(1, 4))
    payloads = []
    for i in range(n_layers):
        ndim = draw(st.integers(1, 3))
        dims = tuple(draw(st.integers(1, 5)) for _ in range(ndim))
        numel = int(np.prod(dims))
        seed = draw(st.integers(0, 2**31))
        rng = np.random.default_rng(seed)
        if draw(st.booleans()):
            payloads.append(TensorPayload(f"t{i}", dims,
                                          dense=rng.standard_normal(numel).astype(np.float32)))
        else:
            k = draw(st.integers(0, numel))
            idx = np.sort(rng.choice(numel, size=k, replace=False)).astype(np.int64)
            vals = rng.standard_normal(k).astype(np.float32)
            payloads.append(TensorPayload(f"t{i}", dims, csr=csr_from_mask(dims, idx, vals)))
    return ModelUpdate(strategy,
                       float(np.float32(draw(st.floats(0, 1)))),
                       float(np.float32(draw(st.floats(0, 1)))),
                       draw(st.integers(1, 10_000)), payloads)


@settings(max_examples=150, deadline=None)
@given(updates())
def test_serialize_roundtrip_property(u):
    blob = serialize_update(u)
    back = deserialize_update(blob)
    assert serialize_update(back) == blob
    assert back.strategy == u.strategy
    assert back.num_samples == u.num_samples
    assert back.sp == u.sp and back.r_mask == u.r_mask
    for p, q in zip(u.payloads, back.payloads):
        assert p.name == q.name and tuple(p.dims) == tuple(q.dims)
        assert np.array_equal(p.to_array(), q.to_array())


def test_reject_empty_update_and_bad_magic_and_truncation():
    with pytest.raises(CodecError, match="no tensors"):
        serialize_update(ModelUpdate(Strategy.FULL_DENSE, 0, 0, 1, []))
    w_t, w_e = toy_models()
    blob = serialize_update(build_update(w_t, w_e, Strategy.TOPK_WEIGHTS, 0.5, 0.1))
    with pytest.raises(BadMagicError):
        deserialize_update(b"XFU1" + blob[4:])
    with pytest.raises(TruncatedUpdateError):
        deserialize_update(blob[:-3])
    with pytest.raises(CorruptPayloadError, match="trailing"):
        deserialize_update(blob + b"\x00")
    with pytest.raises(CorruptPayloadError, match="strategy"):
        deserialize_update(blob[:4] + b"\x09" + blob[5:])


def test_corrupt_csr_detected_on_decode():
    w_t, w_e = toy_models()
    blob = bytearray(serialize_update(build_update(w_t, w_e, Strategy.TOPK_WEIGHTS, 0.5, 0.1)))
    # find the CSR block of fc2.w and break its row_ptr monotonicity
    at = bytes(blob).find(b"fc2.w") + len("fc2.w")
    enc_ndim = 2
    dims_off = at + enc_ndim
    nnz_off = dims_off + 8
    row_ptr_off = nnz_off + 4
    blob[row_ptr_off + 4: row_ptr_off + 8] = struct.pack("<I", 0xFFFFFFFF)
    with pytest.raises(CorruptPayloadError):
        deserialize_update(bytes(blob))


def test_golden_file_stable():
    blob = GOLDEN.read_bytes()
    u = deserialize_update(blob)
    assert serialize_update(u) == blob
    assert u.strategy == Strategy.TOPK_WEIGHTS
    assert u.num_samples == 25
    assert [p.name for p in u.payloads] == ["fc1.w", "fc1.b", "fc2.w", "fc3.w", "fc3.b"]


# ------------------------------------------------------------- strategies


def test_degenerate_keep_fraction_sends_everything():
    w_t, w_e = toy_models()
    sp = 0.6
    for strategy in (Strategy.TOPK_WEIGHTS, Strategy.DIFF_TOPK_WEIGHTS,
                     Strategy.TOPK_WEIGHTS_DIFF):
        u = build_update(w_t, w_e, strategy, sp, sp)  # r_mask == sp -> keep all
        dec = u.decoded_tensors()
        for key, te in w_e.tensor_items():
            tt = dict(w_t.tensor_items())[key]
            want = (te - tt) if strategy in (Strategy.DIFF_TOPK_WEIGHTS,
                                             Strategy.TOPK_WEIGHTS_DIFF) else te
            assert np.allclose(dec[key], want, atol=1e-7), (strategy, key)


def test_no_change_diffs_are_zero_valued():
    w_t, _ = toy_models()
    for strategy in (Strategy.DIFF_TOPK_WEIGHTS, Strategy.TOPK_WEIGHTS_DIFF):
        u = build_update(w_t, w_t.clone(), strategy, 0.75, 0.25)
        for p in u.payloads:
            if p.csr is not None:
                assert not p.csr.values.any()


def test_topk_weights_diff_selects_largest_deltas():
    # 4-element sparsifiable layer, w_t = 0, w_e = [0.5, -0.9, 0.1, 0.3],
    # keep fraction 0.5: the exhaustive sort oracle picks flat positions {0, 1}
    w_t = init_mlp(2, 2, hidden=(2, 2), rng=np.random.default_rng(0))
    zeros = {k: np.zeros_like(v) for k, v in w_t.tensor_items()}
    w_t = w_t.with_tensors(zeros)
    new = {k: np.zeros_like(v) for k, v in w_t.tensor_items()}
    new["fc2.w"] = np.array([[0.5, -0.9], [0.1, 0.3]], dtype=np.float32)
    w_e = w_t.with_tensors(new)
    u = build_update(w_t, w_e, Strategy.TOPK_WEIGHTS_DIFF, 0.75, 0.25)
    payload = {p.name: p for p in u.payloads}["fc2.w"]
    dec = payload.to_array()
    assert payload.csr.nnz == 2
    flat = dec.reshape(-1)
    assert np.array_equal(np.flatnonzero(flat), [0, 1])
    assert np.allclose(flat[[0, 1]], [0.5, -0.9])


def test_diff_topk_ranks_by_trained_weight_magnitude():
    w_t = init_mlp(2, 2, hidden=(2, 2), rng=np.random.default_rng(0))
    base = {k: np.zeros_like(v) for k, v in w_t.tensor_items()}
    base["fc2.w"] = np.array([[10.0, 0.0], [0.0, 0.0]], dtype=np.float32)
    w_t = w_t.with_tensors(base)
    after = {k: v.copy() for k, v in base.items()}
    # position (0,0) stays the largest weight but barely moved; position (1,1)
    # moved a lot but stays small in magnitude
    after["fc2.w"] = np.array([[10.1, 0.0], [0.0, 0.5]], dtype=np.float32)
    w_e = w_t.with_tensors(after)
    u = build_update(w_t, w_e, Strategy.DIFF_TOPK_WEIGHTS, 0.75, 0.0)  # keep 1 entry
    payload = {p.name: p for p in u.payloads}["fc2.w"]
    flat = payload.to_array().reshape(-1)
    assert np.flatnonzero(flat).tolist() == [0]  # picked by |w_e|, not |diff|
    assert np.isclose(flat[0], 0.1, atol=1e-6)


def test_non_sparsifiable_layers_always_dense():
    w_t, w_e = toy_models()
    u = build_update(w_t, w_e, Strategy.TOPK_WEIGHTS, 0.9, 0.0)
    by_name = {p.name: p for p in u.payloads}
    assert by_name["fc1.w"].dense is not None  # input layer stays dense
    assert by_name["fc1.b"].dense is not None
    assert by_name["fc3.w"].dense is not None  # classifier stays dense
    assert by_name["fc2.w"].csr is not None  # the sparsifiable layer


def test_structure_mismatch_rejected():
    w_t, _ = toy_models(dims=(4, 6, 6, 3))
    _, w_e = toy_models(dims=(4, 5, 5, 3))
    with pytest.raises(StructureMismatchError):
        build_update(w_t, w_e, Strategy.TOPK_WEIGHTS, 0.5, 0.1)


def test_nnz_bounded_by_keep_fraction():
    w_t, w_e = toy_models(dims=(6, 12, 12, 3))
    for sp, r in ((0.9, 0.0), (0.9, 0.1), (0.5, 0.2), (0.95, 0.1)):
        kf = keep_fraction_for(sp, r)
        u = build_update(w_t, w_e, Strategy.TOPK_WEIGHTS, sp, r)
        for p in u.payloads:
            if p.csr is not None:
                numel = int(np.prod(p.dims))
                assert p.csr.nnz <= math.ceil(kf * numel) + 1


def test_update_bytes_monotone_in_r_mask():
    w_t, w_e = toy_models(dims=(8, 32, 32, 4))
    sizes = []
    for r in (0.0, 0.1, 0.2, 0.5):
        u = build_update(w_t, w_e, Strategy.TOPK_WEIGHTS, 0.9, r)
        sizes.append(len(serialize_update(u)))
    assert sizes == sorted(sizes)
    assert sizes[0] < sizes[-1]


# ---------------------------------------------------------------- savings


def all_sparsifiable_model(rows=64, cols=64, layers=3):
    """Synthetic model whose every weight tensor is sparsifiable (used for
    byte accounting: no dense layers diluting the ratio)."""
    from zerofl.model import Layer, ModelParams

    rng = np.random.default_rng(0)
    ls = []
    for i in range(layers):
        ls.append(Layer(f"fc{i + 1}", "linear",
                        rng.standard_normal((rows, cols)).astype(np.float32),
                        sparsifiable=True))
    ls.append(Layer("head", "linear", rng.standard_normal((3, rows)).astype(np.float32) * 0,
                    sparsifiable=False))
    return ModelParams(ls, 3)


def test_full_dense_savings_is_one():
    m = all_sparsifiable_model()
    u = build_update(m, m, Strategy.FULL_DENSE, 0.9, 0.1)
    dense_bytes = len(serialize_update(u))
    assert 1.0 <= savings_factor(dense_bytes, dense_bytes) <= 1.0
    payload = sum(int(np.prod(p.dims)) * 4 for p in u.payloads)
    assert (dense_bytes - payload) / dense_bytes < 0.01  # headers under 1%


def test_savings_match_reported_ratios():
    m = all_sparsifiable_model()
    dense_bytes = len(serialize_update(build_update(m, m, Strategy.FULL_DENSE, 0.9, 0.0)))
    u1 = build_update(m, m, Strategy.TOPK_WEIGHTS, 0.95, 0.1)
    s1 = savings_factor(dense_bytes, len(serialize_update(u1)))
    assert 3.0 <= s1 <= 3.4
    u2 = build_update(m, m, Strategy.TOPK_WEIGHTS, 0.9, 0.0)
    s2 = savings_factor(dense_bytes, len(serialize_update(u2)))
    assert 4.3 <= s2 <= 5.1
    with pytest.raises(ValueError):
        savings_factor(10, 0)

"""Client uplink payloads: the three local-sparsification strategies, CSR
encoding, a bit-exact little-endian wire format (ZFU), and byte accounting.

Wire layout (all little-endian):

    magic "ZFU1" | u8 strategy | f32 sp | f32 r_mask | u32 num_samples
    | u32 layer_count | per tensor:
        u16 name_len | name UTF-8 | u8 encoding (0 dense, 1 CSR)
        | u8 ndim | u32 dims[ndim]
        | dense: f32 * prod(dims)
        | CSR:   u32 nnz | u32 row_ptr[rows+1] | u32 col_idx[nnz] | f32 values[nnz]

CSR views a tensor as rows = dims[0], cols = numel / dims[0]. Entries selected
by a top-K mask are transmitted even when their value is exactly 0.0: position
information matters for diff aggregation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .sparsify import keep_fraction_for, topk_mask

MAGIC = b"ZFU1"

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_F32 = struct.Struct("<f")


class Strategy(IntEnum):
    FULL_DENSE = 0
    TOPK_WEIGHTS = 1
    DIFF_TOPK_WEIGHTS = 2
    TOPK_WEIGHTS_DIFF = 3


DIFF_STRATEGIES = (Strategy.DIFF_TOPK_WEIGHTS, Strategy.TOPK_WEIGHTS_DIFF)


class CodecError(ValueError):
    """Base class for wire-format failures."""


class BadMagicError(CodecError):
    pass


class TruncatedUpdateError(CodecError):
    pass


class CorruptPayloadError(CodecError):
    """Structurally invalid payload (CSR invariants, bad enums, trailing bytes)."""


class StructureMismatchError(CodecError):
    """Two models or updates do not share the same tensor layout."""


@dataclass(frozen=True)
class CsrLayerPayload:
    rows: int
    cols: int
    row_ptr: np.ndarray  # uint32, rows+1
    col_idx: np.ndarray  # uint32, nnz
    values: np.ndarray  # float32, nnz

    @property
    def nnz(self) -> int:
        return int(self.col_idx.size)

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise CorruptPayloadError(f"CSR dims must be positive, got {self.rows}x{self.cols}")
        if self.row_ptr.size != self.rows + 1:
            raise CorruptPayloadError(
                f"row_ptr has {self.row_ptr.size} entries, expected rows+1={self.rows + 1}"
            )
        if self.row_ptr[0] != 0:
            raise CorruptPayloadError(f"row_ptr[0] must be 0, got {int(self.row_ptr[0])}")
        if np.any(np.diff(self.row_ptr.astype(np.int64)) < 0):
            raise CorruptPayloadError("row_ptr must be non-decreasing")
        if int(self.row_ptr[-1]) != self.nnz or self.values.size != self.nnz:
            raise CorruptPayloadError(
                f"row_ptr end {int(self.row_ptr[-1])} does not match nnz {self.nnz}"
            )
        if self.nnz and int(self.col_idx.max()) >= self.cols:
            raise CorruptPayloadError(
                f"column index {int(self.col_idx.max())} out of range for {self.cols} cols"
            )
        for r in range(self.rows):
            lo, hi = int(self.row_ptr[r]), int(self.row_ptr[r + 1])
            if hi - lo > 1 and np.any(np.diff(self.col_idx[lo:hi].astype(np.int64)) <= 0):
                raise CorruptPayloadError(f"column indices not strictly increasing in row {r}")


@dataclass
class TensorPayload:
    """One named tensor on the wire: dense bytes or a CSR block."""

    name: str
    dims: tuple[int, ...]
    dense: np.ndarray | None = None
    csr: CsrLayerPayload | None = None

    def __post_init__(self):
        if (self.dense is None) == (self.csr is None):
            raise ValueError("exactly one of dense/csr must be set")

    def to_array(self) -> np.ndarray:
        """Zero-filled dense float32 tensor of shape `dims`."""
        if self.dense is not None:
            return self.dense.reshape(self.dims)
        return csr_decode(self.csr).reshape(self.dims)


@dataclass
class ModelUpdate:
    """One client's uplink: strategy tag, sparsity knobs, sample count and
    per-tensor payloads in model order."""

    strategy: Strategy
    sp: float
    r_mask: float
    num_samples: int
    payloads: list[TensorPayload]

    def decoded_tensors(self) -> dict[str, np.ndarray]:
        return {p.name: p.to_array() for p in self.payloads}

    def num_bytes(self) -> int:
        return len(serialize_update(self))


def csr_encode(t: np.ndarray) -> CsrLayerPayload:
    """Encode a dense tensor as CSR over rows = shape[0]; exact zeros are
    dropped (nnz = count of non-zero entries)."""
    if t.ndim < 1 or t.size == 0:
        raise ValueError(f"cannot CSR-encode a tensor of shape {t.shape}")
    rows = t.shape[0]
    cols = t.size // rows
    flat = np.flatnonzero(t.reshape(-1)).astype(np.int64)
    values = t.reshape(-1)[flat].astype(np.float32)
    return _csr_from_flat(rows, cols, flat, values)


def csr_from_mask(shape: tuple[int, ...], flat_indices: np.ndarray, values: np.ndarray) -> CsrLayerPayload:
    """CSR payload at explicitly chosen flat positions; values may be 0.0."""
    rows = shape[0]
    cols = int(np.prod(shape)) // rows
    return _csr_from_flat(rows, cols, np.asarray(flat_indices, dtype=np.int64),
                          np.asarray(values, dtype=np.float32))


def _csr_from_flat(rows: int, cols: int, flat: np.ndarray, values: np.ndarray) -> CsrLayerPayload:
    row_of = flat // cols
    col_of = flat % cols
    counts = np.bincount(row_of, minlength=rows)
    row_ptr = np.zeros(rows + 1, dtype=np.uint32)
    row_ptr[1:] = np.cumsum(counts).astype(np.uint32)
    return CsrLayerPayload(
        rows=rows,
        cols=cols,
        row_ptr=row_ptr,
        col_idx=col_of.astype(np.uint32),
        values=values.astype(np.float32),
    )


def csr_decode(p: CsrLayerPayload) -> np.ndarray:
    """Dense (rows, cols) float32 tensor; validates all CSR invariants."""
    p.validate()
    out = np.zeros((p.rows, p.cols), dtype=np.float32)
    rows = np.repeat(np.arange(p.rows), np.diff(p.row_ptr.astype(np.int64)))
    out[rows, p.col_idx.astype(np.int64)] = p.values
    return out


def build_update(w_t, w_e, strategy: Strategy, sp: float, r_mask: float,
                 num_samples: int = 1) -> ModelUpdate:
    """Assemble one client's uplink from the received model `w_t` and its
    locally trained `w_e`.

    Sparsifiable weight tensors go out as CSR with keep fraction
    min(1, 1 - sp + r_mask):

    - TOPK_WEIGHTS: top weights of `w_e` by magnitude, zeros elsewhere;
    - DIFF_TOPK_WEIGHTS: positions picked by `w_e` magnitude, values are the
      local deltas `w_e - w_t` at those positions;
    - TOPK_WEIGHTS_DIFF: deltas computed everywhere, the largest-magnitude
      deltas are sent.

    Everything else (biases, non-sparsifiable layers) is sent dense: the
    trained tensors for weight strategies, the full deltas for diff ones.
    """
    strategy = Strategy(strategy)
    items_t = w_t.tensor_items()
    items_e = w_e.tensor_items()
    if [(k, v.shape) for k, v in items_t] != [(k, v.shape) for k, v in items_e]:
        raise StructureMismatchError("w_t and w_e do not share the same tensor layout")
    if num_samples < 1:
        raise ValueError(f"num_samples must be >= 1, got {num_samples}")
    kf = keep_fraction_for(sp, r_mask)
    sparsifiable = set(w_e.sparsifiable_weight_keys())
    payloads = []
    for (key, t_t), (_, t_e) in zip(items_t, items_e):
        dims = tuple(t_e.shape)
        if strategy is Strategy.FULL_DENSE or key not in sparsifiable:
            if strategy in DIFF_STRATEGIES:
                dense = (t_e - t_t).astype(np.float32)
            else:
                dense = t_e.astype(np.float32)
            payloads.append(TensorPayload(name=key, dims=dims, dense=dense.reshape(-1)))
            continue
        if strategy is Strategy.TOPK_WEIGHTS:
            m = topk_mask(t_e, kf)
            values = t_e.reshape(-1)[m.active_indices]
        elif strategy is Strategy.DIFF_TOPK_WEIGHTS:
            m = topk_mask(t_e, kf)
            values = (t_e - t_t).reshape(-1)[m.active_indices]
        else:  # TOPK_WEIGHTS_DIFF
            d = t_e - t_t
            m = topk_mask(d, kf)
            values = d.reshape(-1)[m.active_indices]
        payloads.append(
            TensorPayload(name=key, dims=dims, csr=csr_from_mask(dims, m.active_indices, values))
        )
    return ModelUpdate(
        strategy=strategy,
        sp=float(np.float32(sp)),
        r_mask=float(np.float32(r_mask)),
        num_samples=int(num_samples),
        payloads=payloads,
    )


def serialize_update(u: ModelUpdate) -> bytes:
    if not u.payloads:
        raise CodecError("refusing to serialize an update with no tensors")
    if u.num_samples < 1:
        raise CodecError(f"num_samples must be >= 1, got {u.num_samples}")
    out = bytearray()
    out += MAGIC
    out += _U8.pack(int(Strategy(u.strategy)))
    out += _F32.pack(u.sp)
    out += _F32.pack(u.r_mask)
    out += _U32.pack(u.num_samples)
    out += _U32.pack(len(u.payloads))
    for p in u.payloads:
        name = p.name.encode("utf-8")
        out += _U16.pack(len(name))
        out += name
        out += _U8.pack(0 if p.dense is not None else 1)
        out += _U8.pack(len(p.dims))
        for d in p.dims:
            out += _U32.pack(d)
        if p.dense is not None:
            if p.dense.size != int(np.prod(p.dims)):
                raise CodecError(f"{p.name}: dense payload size mismatch")
            out += np.ascontiguousarray(p.dense, dtype="<f4").tobytes()
        else:
            c = p.csr
            c.validate()
            if c.rows != p.dims[0] or c.rows * c.cols != int(np.prod(p.dims)):
                raise CodecError(f"{p.name}: CSR dims do not match tensor dims {p.dims}")
            out += _U32.pack(c.nnz)
            out += np.ascontiguousarray(c.row_ptr, dtype="<u4").tobytes()
            out += np.ascontiguousarray(c.col_idx, dtype="<u4").tobytes()
            out += np.ascontiguousarray(c.values, dtype="<f4").tobytes()
    return bytes(out)


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedUpdateError(
                f"update truncated: needed {n} bytes at offset {self.pos}, "
                f"have {len(self.buf) - self.pos}"
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return _U8.unpack(self.take(1))[0]

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def f32(self) -> float:
        return _F32.unpack(self.take(4))[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(width * count), dtype=dtype).copy()


def deserialize_update(buf: bytes) -> ModelUpdate:
    cur = _Cursor(buf)
    if cur.take(4) != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    raw_strategy = cur.u8()
    try:
        strategy = Strategy(raw_strategy)
    except ValueError:
        raise CorruptPayloadError(f"unknown strategy byte {raw_strategy}") from None
    sp = cur.f32()
    r_mask = cur.f32()
    num_samples = cur.u32()
    if num_samples < 1:
        raise CorruptPayloadError(f"num_samples must be >= 1, got {num_samples}")
    layer_count = cur.u32()
    if layer_count < 1:
        raise CorruptPayloadError("update contains no tensors")
    payloads = []
    for _ in range(layer_count):
        name_len = cur.u16()
        try:
            name = cur.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptPayloadError(f"tensor name is not valid UTF-8: {exc}") from None
        encoding = cur.u8()
        if encoding not in (0, 1):
            raise CorruptPayloadError(f"{name}: unknown encoding byte {encoding}")
        ndim = cur.u8()
        if ndim < 1:
            raise CorruptPayloadError(f"{name}: ndim must be >= 1")
        dims = tuple(cur.u32() for _ in range(ndim))
        if any(d < 1 for d in dims):
            raise CorruptPayloadError(f"{name}: zero-sized dim in {dims}")
        numel = int(np.prod(dims))
        if encoding == 0:
            dense = cur.array("<f4", numel)
            payloads.append(TensorPayload(name=name, dims=dims, dense=dense))
        else:
            nnz = cur.u32()
            rows = dims[0]
            csr = CsrLayerPayload(
                rows=rows,
                cols=numel // rows,
                row_ptr=cur.array("<u4", rows + 1),
                col_idx=cur.array("<u4", nnz),
                values=cur.array("<f4", nnz),
            )
            csr.validate()
            payloads.append(TensorPayload(name=name, dims=dims, csr=csr))
    if cur.pos != len(buf):
        raise CorruptPayloadError(f"{len(buf) - cur.pos} trailing bytes after update")
    return ModelUpdate(
        strategy=strategy,
        sp=sp,
        r_mask=r_mask,
        num_samples=num_samples,
        payloads=payloads,
    )


def savings_factor(dense_bytes: int, update_bytes: int) -> float:
    """Uplink savings as measured byte ratio: dense / compressed."""
    if update_bytes <= 0:
        raise ValueError(f"update_bytes must be positive, got {update_bytes}")
    return dense_bytes / update_bytes

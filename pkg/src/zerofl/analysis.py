"""Sparsification-effect instruments: per-layer non-zero ratios after
aggregation, mask-position snapshots with Jaccard stability, and theoretical
MAC accounting.

"Non-zero" always means exactly != 0.0. Zeros in aggregated models come from
masking, not from arithmetic underflow, so no epsilon is involved.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import ModelParams
from .tensor import conv_macs, linear_macs, mac_count


@dataclass
class OverlapReport:
    """Per-tensor non-zero ratios of one aggregated model snapshot."""

    round: int
    keep_fraction: float
    ratios: dict[str, float]


def nonzero_ratio(params: ModelParams, tensor_key: str) -> float:
    """Fraction of exactly-non-zero entries in one parameter tensor."""
    t = params.tensors()[tensor_key]
    return int(np.count_nonzero(t)) / t.size


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    """Jaccard similarity of two boolean masks; two empty masks count as 1.0."""
    a = np.asarray(a, dtype=bool).reshape(-1)
    b = np.asarray(b, dtype=bool).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def mask_stability(masks: list[np.ndarray]) -> list[tuple[int, int, float]]:
    """Jaccard similarity of non-zero positions for every snapshot pair i<j."""
    out = []
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            out.append((i, j, jaccard(masks[i], masks[j])))
    return out


class MaskTrace:
    """Accumulates 0/1 non-zero-position snapshots of tracked tensors.

    Each `add` appends one column: the concatenated flattened indicator of the
    tracked tensors, in fixed key order. The matrix therefore has one row per
    tracked weight and one column per snapshot round.
    """

    def __init__(self, tensor_keys: list[str]):
        self.tensor_keys = list(tensor_keys)
        self.rounds: list[int] = []
        self._columns: list[np.ndarray] = []

    def add(self, params: ModelParams, round_index: int) -> np.ndarray:
        tensors = params.tensors()
        col = np.concatenate(
            [(tensors[k].reshape(-1) != 0).astype(np.uint8) for k in self.tensor_keys]
        ) if self.tensor_keys else np.empty(0, dtype=np.uint8)
        self._columns.append(col)
        self.rounds.append(round_index)
        return col

    def __len__(self) -> int:
        return len(self._columns)

    def matrix(self) -> np.ndarray:
        """(tracked weights) x (snapshots) 0/1 matrix."""
        if not self._columns:
            return np.empty((0, 0), dtype=np.uint8)
        return np.stack(self._columns, axis=1)

    def jaccard_pairs(self) -> list[tuple[int, int, float]]:
        """Pairwise Jaccard similarity, reported against the snapshot rounds."""
        pairs = mask_stability([c.astype(bool) for c in self._columns])
        return [(self.rounds[i], self.rounds[j], s) for i, j, s in pairs]


def mask_snapshot(trace: MaskTrace, params: ModelParams, round_index: int) -> np.ndarray:
    """Append one snapshot column to `trace`; returns the column."""
    return trace.add(params, round_index)


def overlap_report(params: ModelParams, tensor_keys, round_index: int,
                   keep_fraction: float) -> OverlapReport:
    return OverlapReport(
        round=round_index,
        keep_fraction=keep_fraction,
        ratios={k: nonzero_ratio(params, k) for k in tensor_keys},
    )


@dataclass
class FlopsRow:
    tensor_key: str
    dense_macs: int
    density: float
    sparse_macs: int


@dataclass
class FlopsReport:
    rows: list[FlopsRow]
    dense_total: int
    sparse_total: int

    @property
    def ratio(self) -> float:
        return self.sparse_total / self.dense_total


def flops_report(params: ModelParams, sp: float, sample_shape: tuple[int, ...]) -> FlopsReport:
    """Per-layer dense vs sparse MAC totals for one sample.

    Sparsifiable layers run at weight density (1 - sp); everything else is
    dense. `sample_shape` is one input sample, e.g. (C, H, W) or (features,).
    """
    if not 0.0 <= sp <= 1.0:
        raise ValueError(f"sp must be in [0,1], got {sp}")
    rows = []
    shape = tuple(sample_shape)
    for layer in params.layers:
        if layer.kind == "conv":
            spec = layer.conv
            dense = conv_macs(spec, shape[1], shape[2], batch=1)
            oh, ow = spec.out_hw(shape[1], shape[2])
            shape = (spec.out_channels, oh, ow)
        elif layer.kind == "linear":
            in_f = int(np.prod(shape))
            out_f = layer.weights.shape[0]
            dense = linear_macs(in_f, out_f, batch=1)
            shape = (out_f,)
        elif layer.kind == "maxpool":
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
            continue
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
            continue
        else:  # relu and other shape-preserving layers
            continue
        density = (1.0 - sp) if layer.sparsifiable else 1.0
        rows.append(
            FlopsRow(
                tensor_key=f"{layer.name}.w",
                dense_macs=dense,
                density=density,
                sparse_macs=mac_count(dense, density),
            )
        )
    return FlopsReport(
        rows=rows,
        dense_total=sum(r.dense_macs for r in rows),
        sparse_total=sum(r.sparse_macs for r in rows),
    )


def write_heatmap(path, trace: MaskTrace) -> None:
    """Plain-text heatmap: one row per tracked weight, one 0/1 column per
    snapshot, whitespace-separated."""
    m = trace.matrix()
    with open(path, "w") as f:
        for row in m:
            f.write(" ".join(str(int(v)) for v in row) + "\n")


def write_jaccard_csv(path, trace: MaskTrace) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["round_a", "round_b", "jaccard"])
        for ra, rb, s in trace.jaccard_pairs():
            w.writerow([ra, rb, repr(float(s))])


def write_overlap_csv(path, rows) -> None:
    """Rows of (round, tensor_key, non-zero ratio)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["round", "layer", "nonzero_ratio"])
        for r, key, ratio in rows:
            w.writerow([r, key, repr(float(ratio))])


def write_flops_csv(path, report: FlopsReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "dense_macs", "density", "sparse_macs"])
        for row in report.rows:
            w.writerow([row.tensor_key, row.dense_macs, repr(row.density), row.sparse_macs])
        w.writerow(["total", report.dense_total, repr(report.ratio), report.sparse_total])

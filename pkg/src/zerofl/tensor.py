"""Dense tensor kernels: direct 2-d convolution and linear layers with exact
backward passes, plus multiply-accumulate (MAC) accounting.

All kernels preserve the dtype of their inputs (float32 for training, float64
for gradient checking) and accumulate in a fixed loop order, so identical
inputs produce bitwise-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """An operand's shape is inconsistent with the operation."""


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-d convolution (cross-correlation) layer."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError(f"channel counts must be >= 1, got {self.in_channels}x{self.out_channels}")
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ShapeError(f"kernel dims must be >= 1, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")

    def out_hw(self, in_h: int, in_w: int) -> tuple[int, int]:
        """Output spatial dims for an `in_h` x `in_w` input."""
        oh = (in_h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (in_w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"output dims {oh}x{ow} < 1 for input {in_h}x{in_w} with {self}"
            )
        return oh, ow

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)


def _check_conv_operands(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> None:
    if x.ndim != 4:
        raise ShapeError(f"input must be 4-d (N,C,H,W), got ndim={x.ndim}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {w.shape} does not match spec {spec.weight_shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"input channel axis has size {x.shape[1]}, spec expects {spec.in_channels}"
        )


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Cross-correlate `x` (N,C,H,W) with `w` (K,C,kh,kw) -> (N,K,H',W').

    Direct implementation: a fixed (kh, kw) loop nest accumulating one kernel
    position at a time, so the summation order never changes.
    """
    _check_conv_operands(x, w, spec)
    n = x.shape[0]
    oh, ow = spec.out_hw(x.shape[2], x.shape[3])
    xp = _pad_hw(x, spec.padding)
    s = spec.stride
    out = np.zeros((n, spec.out_channels, oh, ow), dtype=x.dtype)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            patch = xp[:, :, i : i + s * oh : s, j : j + s * ow : s]
            out += np.einsum("nchw,kc->nkhw", patch, w[:, :, i, j])
    return out


def conv2d_backward_input(
    grad_out: np.ndarray, w: np.ndarray, spec: ConvSpec, input_hw: tuple[int, int]
) -> np.ndarray:
    """Gradient of the loss w.r.t. the convolution input.

    Equivalent to the transpose convolution of `grad_out` with `w`. The input
    spatial size must be given explicitly because strided output dims do not
    determine it uniquely.
    """
    if grad_out.ndim != 4:
        raise ShapeError(f"grad_out must be 4-d (N,K,H',W'), got ndim={grad_out.ndim}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {w.shape} does not match spec {spec.weight_shape}")
    if grad_out.shape[1] != spec.out_channels:
        raise ShapeError(
            f"grad_out channel axis has size {grad_out.shape[1]}, spec expects {spec.out_channels}"
        )
    in_h, in_w = input_hw
    oh, ow = spec.out_hw(in_h, in_w)
    if grad_out.shape[2:] != (oh, ow):
        raise ShapeError(
            f"grad_out spatial dims {grad_out.shape[2:]} do not match forward output {(oh, ow)}"
        )
    n = grad_out.shape[0]
    p, s = spec.padding, spec.stride
    dxp = np.zeros((n, spec.in_channels, in_h + 2 * p, in_w + 2 * p), dtype=grad_out.dtype)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            dxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += np.einsum(
                "nkhw,kc->nchw", grad_out, w[:, :, i, j]
            )
    return np.ascontiguousarray(dxp[:, :, p : p + in_h, p : p + in_w])


def conv2d_backward_weights(grad_out: np.ndarray, x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Gradient of the loss w.r.t. the convolution weights, shape (K,C,kh,kw)."""
    _check_conv_operands(x, np.zeros(spec.weight_shape, dtype=grad_out.dtype), spec)
    oh, ow = spec.out_hw(x.shape[2], x.shape[3])
    if grad_out.shape != (x.shape[0], spec.out_channels, oh, ow):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{(x.shape[0], spec.out_channels, oh, ow)}"
        )
    xp = _pad_hw(x, spec.padding)
    s = spec.stride
    dw = np.zeros(spec.weight_shape, dtype=grad_out.dtype)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            patch = xp[:, :, i : i + s * oh : s, j : j + s * ow : s]
            dw[:, :, i, j] = np.einsum("nkhw,nchw->kc", grad_out, patch)
    return dw


def linear_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Affine map of `x` (B,in) by `w` (out,in): x @ w.T (+ bias)."""
    if x.ndim != 2:
        raise ShapeError(f"linear input must be 2-d (B,in), got ndim={x.ndim}")
    if w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"input features {x.shape[1]} do not match weight columns {w.shape}")
    out = x @ w.T
    if bias is not None:
        out = out + bias[None, :]
    return out


def linear_backward_input(grad_out: np.ndarray, w: np.ndarray) -> np.ndarray:
    if grad_out.shape[1] != w.shape[0]:
        raise ShapeError(f"grad_out features {grad_out.shape[1]} do not match weight rows {w.shape}")
    return grad_out @ w


def linear_backward_weights(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    if grad_out.shape[0] != x.shape[0]:
        raise ShapeError(f"batch sizes differ: grad_out {grad_out.shape[0]}, input {x.shape[0]}")
    return grad_out.T @ x


def conv_macs(spec: ConvSpec, in_h: int, in_w: int, batch: int = 1) -> int:
    """Dense multiply-accumulate count of one convolution: N*K*C*kh*kw*H'*W'."""
    oh, ow = spec.out_hw(in_h, in_w)
    return batch * spec.out_channels * spec.in_channels * spec.kernel_h * spec.kernel_w * oh * ow


def linear_macs(in_features: int, out_features: int, batch: int = 1) -> int:
    return batch * in_features * out_features


def mac_count(dense_macs: int, density: float) -> int:
    """MACs at a given operand density: floor(dense * density)."""
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density must be in [0,1], got {density}")
    return int(math.floor(dense_macs * density))

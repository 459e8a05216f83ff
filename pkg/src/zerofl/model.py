"""Desk-scale models (MLP and small CNN) trained with sparse weights and
activations.

In train mode every sparsifiable layer runs on top-K-masked weights and
top-K-masked input activations, with both masks recomputed from magnitudes at
each forward pass. The backward pass is the exact gradient of that masked
forward: input gradients flow through the masked weights, weight gradients
use the masked activations, and the returned weight gradients are dense
tensors (every position receives a value, including currently inactive ones).
In eval mode only the weights are masked; evaluating without the weight mask
is deliberately not offered, since sparse-trained models are only meaningful
under their mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sparsify import SparsityConfig, TopKMask, apply_mask, mask_cardinality, topk_mask
from .tensor import (
    ConvSpec,
    ShapeError,
    conv2d_backward_input,
    conv2d_backward_weights,
    conv2d_forward,
    linear_backward_input,
    linear_backward_weights,
    linear_forward,
)

TRAINABLE_KINDS = ("conv", "linear")


@dataclass
class Layer:
    """One model layer. Only conv/linear layers carry weights."""

    name: str
    kind: str  # conv | linear | relu | maxpool | flatten
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    sparsifiable: bool = False
    conv: ConvSpec | None = None

    @property
    def trainable(self) -> bool:
        return self.kind in TRAINABLE_KINDS


@dataclass
class ModelParams:
    """Ordered layer list plus the class count of the final classifier."""

    layers: list[Layer]
    num_classes: int

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique, got {names}")
        trainable = self.trainable_layers()
        if not trainable:
            raise ValueError("model has no trainable layers")
        for layer in trainable:
            if layer.weights is None:
                raise ValueError(f"trainable layer {layer.name!r} has no weights")
        if trainable[-1].sparsifiable:
            raise ValueError("the final classifier layer must not be sparsifiable")

    def trainable_layers(self) -> list[Layer]:
        return [l for l in self.layers if l.trainable]

    def tensor_items(self) -> list[tuple[str, np.ndarray]]:
        """All parameter tensors as (key, array), keys like 'fc1.w' / 'fc1.b',
        in canonical (layer, weight-then-bias) order."""
        items = []
        for layer in self.trainable_layers():
            items.append((f"{layer.name}.w", layer.weights))
            if layer.bias is not None:
                items.append((f"{layer.name}.b", layer.bias))
        return items

    def tensors(self) -> dict[str, np.ndarray]:
        return dict(self.tensor_items())

    def sparsifiable_weight_keys(self) -> list[str]:
        return [f"{l.name}.w" for l in self.trainable_layers() if l.sparsifiable]

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "ModelParams":
        """Copy of the model with parameter arrays replaced by `tensors`."""
        new_layers = []
        for layer in self.layers:
            w, b = layer.weights, layer.bias
            if layer.trainable:
                w = np.array(tensors[f"{layer.name}.w"], copy=True)
                if layer.bias is not None:
                    b = np.array(tensors[f"{layer.name}.b"], copy=True)
            new_layers.append(
                Layer(layer.name, layer.kind, w, b, layer.sparsifiable, layer.conv)
            )
        return ModelParams(new_layers, self.num_classes)

    def clone(self) -> "ModelParams":
        return self.with_tensors(self.tensors())

    def astype(self, dtype) -> "ModelParams":
        return self.with_tensors({k: v.astype(dtype) for k, v in self.tensor_items()})

    def num_params(self) -> int:
        return sum(int(v.size) for _, v in self.tensor_items())


def init_mlp(
    input_dim: int,
    num_classes: int,
    hidden: tuple[int, ...] = (32, 32),
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """MLP with ReLU hidden layers.

    First and last linear layers stay dense (input layer unchanged, final
    classifier dense); every hidden-to-hidden layer is sparsifiable and
    carries no bias.
    """
    rng = rng or np.random.default_rng(0)
    dims = (input_dim, *hidden, num_classes)
    layers: list[Layer] = []
    n_linear = len(dims) - 1
    for i in range(n_linear):
        fan_in, fan_out = dims[i], dims[i + 1]
        first, last = i == 0, i == n_linear - 1
        sparsif = not (first or last)
        layers.append(
            Layer(
                name=f"fc{i + 1}",
                kind="linear",
                weights=_uniform_init(rng, (fan_out, fan_in), fan_in),
                bias=None if sparsif else np.zeros(fan_out, dtype=np.float32),
                sparsifiable=sparsif,
            )
        )
        if not last:
            layers.append(Layer(name=f"relu{i + 1}", kind="relu"))
    return ModelParams(layers, num_classes)


def init_cnn(
    in_channels: int,
    image_hw: tuple[int, int],
    num_classes: int,
    channels: tuple[int, int] = (8, 16),
    hidden: int = 32,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """Small CNN: conv3x3-pool-conv3x3-pool-linear-linear.

    Both convolutions and the first linear layer are sparsifiable (no bias);
    the final classifier stays dense with a bias.
    """
    rng = rng or np.random.default_rng(0)
    h, w = image_hw
    c1, c2 = channels
    spec1 = ConvSpec(in_channels, c1, 3, 3, stride=1, padding=1)
    spec2 = ConvSpec(c1, c2, 3, 3, stride=1, padding=1)
    if h % 4 or w % 4:
        raise ShapeError(f"image dims must be divisible by 4 for two 2x2 pools, got {h}x{w}")
    flat_dim = c2 * (h // 4) * (w // 4)
    layers = [
        Layer("conv1", "conv", _uniform_init(rng, spec1.weight_shape, in_channels * 9),
              sparsifiable=True, conv=spec1),
        Layer("relu1", "relu"),
        Layer("pool1", "maxpool"),
        Layer("conv2", "conv", _uniform_init(rng, spec2.weight_shape, c1 * 9),
              sparsifiable=True, conv=spec2),
        Layer("relu2", "relu"),
        Layer("pool2", "maxpool"),
        Layer("flatten", "flatten"),
        Layer("fc1", "linear", _uniform_init(rng, (hidden, flat_dim), flat_dim),
              sparsifiable=True),
        Layer("relu3", "relu"),
        Layer("fc2", "linear", _uniform_init(rng, (num_classes, hidden), hidden),
              bias=np.zeros(num_classes, dtype=np.float32)),
    ]
    return ModelParams(layers, num_classes)


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


@dataclass
class ForwardTrace:
    """Everything the backward pass needs from one forward pass."""

    mode: str
    eff_tensors: dict[str, np.ndarray]  # parameter tensors as consumed (weights masked)
    weight_masks: dict[str, TopKMask]  # per sparsifiable layer name
    act_masks: dict[str, TopKMask]  # per sparsifiable layer name, train mode only
    layer_inputs: list[np.ndarray]  # input each layer consumed (post activation-mask)
    logits: np.ndarray
    probs: np.ndarray
    loss: float
    labels: np.ndarray
    batch_size: int
    selection_pattern: list[np.ndarray]  # ReLU signs and pool switches, see _forward_with_tensors


def _is_sparsifiable(layer: Layer, cfg: SparsityConfig) -> bool:
    """Per-layer flag from the sparsity config when present, else the model's."""
    return bool(cfg.sparsifiable.get(layer.name, layer.sparsifiable))


def _softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, float]:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(np.mean(-np.log(probs[np.arange(n), labels])))
    return probs, loss


def _activation_mask(a: np.ndarray, keep: float, per_sample: bool) -> TopKMask:
    if not per_sample or a.shape[0] <= 1:
        return topk_mask(a, keep)
    b = a.shape[0]
    rest = a.size // b
    flat = np.abs(a.reshape(b, rest))
    count = mask_cardinality(keep, rest)
    if count == 0:
        idx = np.empty(0, dtype=np.int64)
    else:
        order = np.argsort(-flat, axis=1, kind="stable")[:, :count]
        idx = np.sort((order + np.arange(b)[:, None] * rest).reshape(-1).astype(np.int64))
    return TopKMask(tuple(a.shape), idx, keep)


def _check_batch_labels(params: ModelParams, batch: np.ndarray, labels: np.ndarray) -> None:
    first = params.trainable_layers()[0]
    if first.kind == "conv" and batch.ndim != 4:
        raise ShapeError(f"conv model expects a 4-d batch, got ndim={batch.ndim}")
    if batch.shape[0] != labels.shape[0]:
        raise ShapeError(f"batch size {batch.shape[0]} does not match labels {labels.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= params.num_classes):
        raise ValueError(
            f"label out of range: got {int(labels.min())}..{int(labels.max())} "
            f"for {params.num_classes} classes"
        )


def _forward_with_tensors(
    params: ModelParams,
    batch: np.ndarray,
    labels: np.ndarray,
    eff_tensors: dict[str, np.ndarray],
    cfg: SparsityConfig,
    mode: str,
    frozen_act_masks: dict[str, TopKMask] | None,
) -> ForwardTrace:
    """Run the network with explicitly given parameter tensors.

    Activation masks are taken from `frozen_act_masks` when given, recomputed
    from the live activations otherwise (train mode only).
    """
    act_masks: dict[str, TopKMask] = {}
    layer_inputs: list[np.ndarray] = []
    pattern: list[np.ndarray] = []
    a = batch
    for layer in params.layers:
        consumed = a
        if layer.kind in TRAINABLE_KINDS:
            if _is_sparsifiable(layer, cfg) and mode == "train":
                if frozen_act_masks is not None:
                    amask = frozen_act_masks[layer.name]
                else:
                    amask = _activation_mask(a, cfg.keep_fraction, cfg.per_sample_activations)
                act_masks[layer.name] = amask
                consumed = apply_mask(a, amask)
            w = eff_tensors[f"{layer.name}.w"]
            b = eff_tensors.get(f"{layer.name}.b")
            if layer.kind == "conv":
                out = conv2d_forward(consumed, w, layer.conv)
                if b is not None:
                    out = out + b[None, :, None, None]
            else:
                out = linear_forward(consumed, w, b)
            a = out
        elif layer.kind == "relu":
            a = np.maximum(consumed, 0)
            pattern.append(consumed > 0)
        elif layer.kind == "maxpool":
            a = _maxpool2x2_forward(consumed)
            pattern.append(_pool_windows(consumed).argmax(axis=-1))
        elif layer.kind == "flatten":
            a = consumed.reshape(consumed.shape[0], -1)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        layer_inputs.append(consumed)
    logits = a
    probs, loss = _softmax_xent(logits, labels)
    return ForwardTrace(
        mode=mode,
        eff_tensors=eff_tensors,
        weight_masks={},
        act_masks=act_masks,
        layer_inputs=layer_inputs,
        logits=logits,
        probs=probs,
        loss=loss,
        labels=labels,
        batch_size=batch.shape[0],
        selection_pattern=pattern,
    )


def forward_swat(
    params: ModelParams,
    batch: np.ndarray,
    labels: np.ndarray,
    cfg: SparsityConfig,
    mode: str = "train",
) -> ForwardTrace:
    """Forward pass with top-K sparsification.

    Sparsifiable layers run on magnitude-masked weights in both modes (masked
    inference is mandatory for sparse-trained models); in train mode their
    input activations are top-K-masked as well, and the masks are recorded in
    the trace for the backward pass.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    labels = np.asarray(labels)
    _check_batch_labels(params, batch, labels)
    eff: dict[str, np.ndarray] = {}
    wmasks: dict[str, TopKMask] = {}
    for layer in params.trainable_layers():
        w = layer.weights
        if _is_sparsifiable(layer, cfg):
            m = topk_mask(w, cfg.keep_fraction)
            wmasks[layer.name] = m
            w = apply_mask(w, m)
        eff[f"{layer.name}.w"] = w
        if layer.bias is not None:
            eff[f"{layer.name}.b"] = layer.bias
    trace = _forward_with_tensors(params, batch, labels, eff, cfg, mode, None)
    trace.weight_masks = wmasks
    return trace


def backward_swat(
    params: ModelParams, trace: ForwardTrace, cfg: SparsityConfig
) -> dict[str, np.ndarray]:
    """Gradients of the traced forward loss, keyed like `tensor_items()`.

    Input-activation gradients propagate through the masked weights; weight
    gradients are computed from the masked activations recorded in the trace.
    All returned gradients are dense tensors of their parameter's exact shape.
    """
    if trace.mode != "train":
        raise ValueError("backward requires a trace produced in train mode")
    grads: dict[str, np.ndarray] = {}
    n = trace.batch_size
    onehot = np.zeros_like(trace.probs)
    onehot[np.arange(n), trace.labels] = 1
    g = (trace.probs - onehot) / trace.probs.dtype.type(n)
    for layer, consumed in zip(reversed(params.layers), reversed(trace.layer_inputs)):
        if layer.kind in TRAINABLE_KINDS:
            w = trace.eff_tensors[f"{layer.name}.w"]
            if layer.kind == "conv":
                grads[f"{layer.name}.w"] = conv2d_backward_weights(g, consumed, layer.conv)
                if layer.bias is not None:
                    grads[f"{layer.name}.b"] = g.sum(axis=(0, 2, 3))
                g = conv2d_backward_input(g, w, layer.conv, consumed.shape[2:])
            else:
                grads[f"{layer.name}.w"] = linear_backward_weights(g, consumed)
                if layer.bias is not None:
                    grads[f"{layer.name}.b"] = g.sum(axis=0)
                g = linear_backward_input(g, w)
            amask = trace.act_masks.get(layer.name)
            if amask is not None:
                g = g * amask.as_bool()
        elif layer.kind == "relu":
            g = g * (consumed > 0)
        elif layer.kind == "maxpool":
            g = _maxpool2x2_backward(consumed, g)
        elif layer.kind == "flatten":
            g = g.reshape(consumed.shape)
    return grads


def _maxpool2x2_forward(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = _pool_windows(x)
    return win.max(axis=-1)


def _maxpool2x2_backward(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    win = _pool_windows(x)
    idx = win.argmax(axis=-1)  # first max wins on ties
    gwin = np.zeros_like(win)
    np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
    return (
        gwin.reshape(n, c, h // 2, w // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )


def _pool_windows(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray], lr: float) -> ModelParams:
    """One dense SGD step: w <- w - lr * grad for every parameter tensor,
    including currently inactive weight positions."""
    new = {}
    for key, t in params.tensor_items():
        new[key] = t - t.dtype.type(lr) * grads[key]
    return params.with_tensors(new)


def evaluate(params: ModelParams, dataset, cfg: SparsityConfig, batch_size: int = 256):
    """Masked-inference accuracy and mean loss over a dataset.

    Always evaluates through `forward_swat` in eval mode so the configured
    sparsity mask is applied.
    """
    x, y = dataset.samples, dataset.labels
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, batch_size):
        xb, yb = x[start : start + batch_size], y[start : start + batch_size]
        trace = forward_swat(params, xb, yb, cfg, mode="eval")
        correct += int((trace.logits.argmax(axis=1) == yb).sum())
        loss_sum += trace.loss * xb.shape[0]
    return correct / n, loss_sum / n


def finite_difference_gradients(
    params: ModelParams,
    batch: np.ndarray,
    labels: np.ndarray,
    cfg: SparsityConfig,
    eps: float = 1e-4,
    trace: ForwardTrace | None = None,
) -> dict[str, np.ndarray]:
    """Central finite differences of the masked training loss.

    Probes perturb the effective parameter tensors (weights as consumed after
    masking) with all masks frozen from `trace`, so the result is directly
    comparable with `backward_swat`. Runs at whatever precision `params` uses.

    A probe whose +/-eps evaluations change any discrete selection (a ReLU
    sign or a pool switch) has stepped across a kink, where central
    differences do not estimate a derivative; such coordinates come back as
    NaN and are excluded from comparisons. With masked weights and masked
    activations this happens wherever disjoint supports make a pre-activation
    exactly zero.
    """
    labels = np.asarray(labels)
    if trace is None:
        trace = forward_swat(params, batch, labels, cfg, mode="train")
    base = {k: v.copy() for k, v in trace.eff_tensors.items()}
    base_pattern = trace.selection_pattern
    frozen_acts = trace.act_masks
    out: dict[str, np.ndarray] = {}
    for key, tensor in base.items():
        num = np.zeros_like(tensor)
        flat = tensor.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            tp = _forward_with_tensors(params, batch, labels, base, cfg, "train", frozen_acts)
            flat[i] = orig - eps
            tm = _forward_with_tensors(params, batch, labels, base, cfg, "train", frozen_acts)
            flat[i] = orig
            if _same_pattern(tp.selection_pattern, base_pattern) and _same_pattern(
                tm.selection_pattern, base_pattern
            ):
                nflat[i] = (tp.loss - tm.loss) / (2.0 * eps)
            else:
                nflat[i] = np.nan
        out[key] = num
    return out


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def max_relative_error(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> float:
    """Max elementwise relative error between two gradient dicts.

    NaN entries on either side mark coordinates excluded from the comparison
    (kink-crossing probes). The denominator is floored at 1e-6 so rounding
    noise on exactly-zero gradients does not register as disagreement.
    """
    worst = 0.0
    for key in a:
        x, y = a[key], b[key]
        rel = np.abs(x - y) / np.maximum(np.abs(x) + np.abs(y), 1e-6)
        rel = np.where(np.isnan(x) | np.isnan(y), 0.0, rel)
        worst = max(worst, float(rel.max()))
    return worst


def grad_check(
    params: ModelParams,
    batch: np.ndarray,
    labels: np.ndarray,
    cfg: SparsityConfig,
    eps: float = 1e-4,
) -> float:
    """Compare `backward_swat` against central finite differences with all
    masks frozen; returns the max relative error. Runs a float64 shadow of
    the model regardless of its training precision."""
    p64 = params.astype(np.float64)
    b64 = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels)
    trace = forward_swat(p64, b64, labels, cfg, mode="train")
    analytic = backward_swat(p64, trace, cfg)
    numeric = finite_difference_gradients(p64, b64, labels, cfg, eps=eps, trace=trace)
    return max_relative_error(analytic, numeric)

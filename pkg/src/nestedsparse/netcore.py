"""Dense tensors and explicit backpropagation for small feed-forward networks.

Activations travel between layers as 2-D ``(batch, features)`` arrays.
Convolutional layers interpret their input features as a flattened NHWC
image and are lowered to a GEMM through :func:`im2col`, so a convolution
weight matrix has shape ``(out_channels, kernel_h * kernel_w * in_channels)``.
"""

from __future__ import annotations

import copy as _copy
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ._validation import FLOAT, as_matrix
from .exceptions import (
    DimensionError,
    GeometryError,
    ScheduleExhaustedError,
    StaleCacheError,
)


class LayerKind(str, Enum):
    FC = "fc"
    CONV = "conv"
    RELU = "relu"
    SOFTMAX_CE = "softmax_ce"


class TargetKind(str, Enum):
    HARD = "hard"
    SOFT = "soft"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_h: int = 1
    kernel_w: int = 1
    stride: int = 1
    padding: int = 0
    in_h: int = 0
    in_w: int = 0
    prunable: bool = False
    bias: bool = True
    name: str = ""

    @classmethod
    def fc(cls, in_features, out_features, prunable=False, bias=True, name=""):
        return cls(LayerKind.FC, in_features=int(in_features),
                   out_features=int(out_features), prunable=prunable,
                   bias=bias, name=name)

    @classmethod
    def conv(cls, in_channels, out_channels, kernel, in_hw, stride=1, padding=0,
             prunable=False, bias=True, name=""):
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        h, w = (in_hw, in_hw) if np.isscalar(in_hw) else in_hw
        spec = cls(LayerKind.CONV, in_channels=int(in_channels),
                   out_channels=int(out_channels), kernel_h=int(kh),
                   kernel_w=int(kw), stride=int(stride), padding=int(padding),
                   in_h=int(h), in_w=int(w), prunable=prunable, bias=bias,
                   name=name)
        spec.out_hw  # validates geometry
        return spec

    @classmethod
    def relu(cls, name=""):
        return cls(LayerKind.RELU, name=name)

    @classmethod
    def softmax_ce(cls, name=""):
        return cls(LayerKind.SOFTMAX_CE, name=name)

    @property
    def weighted(self):
        return self.kind in (LayerKind.FC, LayerKind.CONV)

    @property
    def out_hw(self):
        return conv_output_hw(self.in_h, self.in_w, self.kernel_h, self.kernel_w,
                              self.stride, self.padding)

    @property
    def weight_shape(self):
        if self.kind is LayerKind.FC:
            return (self.out_features, self.in_features)
        if self.kind is LayerKind.CONV:
            return (self.out_channels,
                    self.kernel_h * self.kernel_w * self.in_channels)
        raise TypeError(f"{self.kind.value} layer has no weights")

    @property
    def fan_in(self):
        return self.weight_shape[1]

    def input_size(self):
        if self.kind is LayerKind.FC:
            return self.in_features
        if self.kind is LayerKind.CONV:
            return self.in_h * self.in_w * self.in_channels
        return None

    def output_size(self, input_size):
        if self.kind is LayerKind.FC:
            return self.out_features
        if self.kind is LayerKind.CONV:
            oh, ow = self.out_hw
            return oh * ow * self.out_channels
        return input_size

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["kind"] = LayerKind(d["kind"])
        return cls(**d)


def conv_output_hw(in_h, in_w, kernel_h, kernel_w, stride=1, padding=0):
    if stride < 1:
        raise GeometryError(f"stride must be >= 1, got {stride}")
    oh = (in_h + 2 * padding - kernel_h) // stride + 1
    ow = (in_w + 2 * padding - kernel_w) // stride + 1
    if oh <= 0 or ow <= 0 or in_h <= 0 or in_w <= 0:
        raise GeometryError(
            f"input {in_h}x{in_w} with kernel {kernel_h}x{kernel_w}, "
            f"stride {stride}, padding {padding} gives output {oh}x{ow}")
    return oh, ow


def im2col(x, kernel_h, kernel_w, stride=1, padding=0):
    """Unroll NHWC patches into rows.

    Returns an array of shape ``(N * out_h * out_w, kernel_h * kernel_w * C)``
    whose columns are ordered ``(ky, kx, c)``; padded positions hold zeros.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise DimensionError(f"im2col expects an NHWC tensor, got shape {x.shape}")
    n, h, w, c = x.shape
    oh, ow = conv_output_hw(h, w, kernel_h, kernel_w, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = np.empty((n, oh, ow, kernel_h, kernel_w, c), dtype=x.dtype)
    for ky in range(kernel_h):
        y_end = ky + stride * oh
        for kx in range(kernel_w):
            x_end = kx + stride * ow
            cols[:, :, :, ky, kx, :] = x[:, ky:y_end:stride, kx:x_end:stride, :]
    return cols.reshape(n * oh * ow, kernel_h * kernel_w * c)


def col2im(cols, input_shape, kernel_h, kernel_w, stride=1, padding=0):
    """Adjoint of :func:`im2col`: scatter-add patch rows back into NHWC."""
    n, h, w, c = input_shape
    oh, ow = conv_output_hw(h, w, kernel_h, kernel_w, stride, padding)
    cols = cols.reshape(n, oh, ow, kernel_h, kernel_w, c)
    img = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    for ky in range(kernel_h):
        y_end = ky + stride * oh
        for kx in range(kernel_w):
            x_end = kx + stride * ow
            img[:, ky:y_end:stride, kx:x_end:stride, :] += cols[:, :, :, ky, kx, :]
    return img[:, padding:padding + h, padding:padding + w, :]


def conv_forward(spec, x_flat, weight, bias=None):
    """Convolution of a flattened NHWC batch; returns (output_flat, cols)."""
    n = x_flat.shape[0]
    x = x_flat.reshape(n, spec.in_h, spec.in_w, spec.in_channels)
    cols = im2col(x, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding)
    out = cols @ weight.T
    if bias is not None:
        out += bias
    return out.reshape(n, -1), cols


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, targets):
    """Mean cross-entropy between softmax(logits) and a target distribution."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-(targets * log_p).sum() / logits.shape[0])


def one_hot(labels, n_classes, dtype=FLOAT):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


class ToyNetwork:
    """Ordered layers plus per-weighted-layer parameters and buffers.

    ``weights[i]``/``biases[i]``/``grad[i]`` refer to the i-th *weighted*
    layer; ``weighted_layers`` maps those indices back into ``layers``.
    """

    def __init__(self, layers, weights=None, biases=None, seed=0, dtype=FLOAT):
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        self.weighted_layers = [i for i, l in enumerate(self.layers) if l.weighted]
        if not self.weighted_layers:
            raise ValueError("network needs at least one weighted layer")
        if self.layers[self.weighted_layers[0]].prunable:
            raise ValueError("the first weighted layer must be dense (prunable=False)")
        self._check_shapes()
        rng = np.random.default_rng(seed)
        if weights is None:
            weights = [kaiming_uniform(s.weight_shape, s.fan_in, rng, self.dtype)
                       for s in self.weighted_specs]
        if biases is None:
            biases = [np.zeros(s.weight_shape[0], dtype=self.dtype) if s.bias else None
                      for s in self.weighted_specs]
        self.weights = [np.array(w, dtype=self.dtype) for w in weights]
        self.biases = [None if b is None else np.array(b, dtype=self.dtype)
                       for b in biases]
        for spec, w, b in zip(self.weighted_specs, self.weights, self.biases):
            if w.shape != spec.weight_shape:
                raise DimensionError(f"weight shape {w.shape} != {spec.weight_shape}",
                                     layer=spec.name)
            if (b is None) == spec.bias or (b is not None and b.shape != (w.shape[0],)):
                raise DimensionError("bias does not match layer spec", layer=spec.name)
        self.grad = [np.zeros_like(w) for w in self.weights]
        self.grad_bias = [None if b is None else np.zeros_like(b) for b in self.biases]
        self.momentum = [np.zeros_like(w) for w in self.weights]
        self.momentum_bias = [None if b is None else np.zeros_like(b) for b in self.biases]
        self.version = 0

    def _check_shapes(self):
        size = None
        for i, spec in enumerate(self.layers):
            need = spec.input_size()
            if need is not None and size is not None and need != size:
                raise DimensionError(
                    f"expects {need} input features, previous layer gives {size}",
                    layer=spec.name or i)
            if size is None:
                size = need
            size = spec.output_size(size)
        self.input_size = self.layers[self.weighted_layers[0]].input_size()
        self.n_classes = size

    @property
    def weighted_specs(self):
        return [self.layers[i] for i in self.weighted_layers]

    @property
    def prunable(self):
        return [s.prunable for s in self.weighted_specs]

    def layer_name(self, k):
        spec = self.weighted_specs[k]
        return spec.name or f"layer{self.weighted_layers[k]}"

    def zero_grad(self):
        for g in self.grad:
            g.fill(0)
        for g in self.grad_bias:
            if g is not None:
                g.fill(0)

    def copy(self):
        return _copy.deepcopy(self)

    def __repr__(self):
        kinds = ",".join(l.kind.value for l in self.layers)
        return f"ToyNetwork([{kinds}], in={self.input_size}, classes={self.n_classes})"


def kaiming_uniform(shape, fan_in, rng, dtype=FLOAT):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class ForwardCache:
    inputs: list
    cols: dict
    weights: list
    biases: list
    net_id: int
    version: int
    overridden: bool
    logits: np.ndarray = field(repr=False, default=None)


@dataclass
class Gradients:
    weights: list
    biases: list
    loss: float


def forward(net, batch, weights=None):
    """Run the network on `batch`, returning ``(logits, cache)``.

    `weights` optionally replaces ``net.weights`` (e.g. with masked copies);
    biases always come from the network.
    """
    overridden = weights is not None
    weights = net.weights if weights is None else list(weights)
    x = as_matrix(batch, "batch", dtype=net.dtype)
    if x.shape[1] != net.input_size:
        raise DimensionError(
            f"batch has {x.shape[1]} features, network expects {net.input_size}",
            layer=net.layer_name(0))
    inputs, cols = [], {}
    k = 0
    for i, spec in enumerate(net.layers):
        inputs.append(x)
        if spec.kind is LayerKind.FC:
            w = weights[k]
            if w.shape != spec.weight_shape:
                raise DimensionError(f"weight shape {w.shape} != {spec.weight_shape}",
                                     layer=net.layer_name(k))
            x = x @ w.T
            if net.biases[k] is not None:
                x = x + net.biases[k]
            k += 1
        elif spec.kind is LayerKind.CONV:
            w = weights[k]
            if w.shape != spec.weight_shape:
                raise DimensionError(f"weight shape {w.shape} != {spec.weight_shape}",
                                     layer=net.layer_name(k))
            x, cols[i] = conv_forward(spec, x, w, net.biases[k])
            k += 1
        elif spec.kind is LayerKind.RELU:
            x = np.maximum(x, 0)
        # SOFTMAX_CE is the loss head: logits pass through unchanged
    cache = ForwardCache(inputs, cols, weights, net.biases, id(net), net.version,
                         overridden, logits=x)
    return x, cache


def loss_gradient(logits, targets, target_kind=TargetKind.HARD):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    target_kind = TargetKind(target_kind)
    targets = np.asarray(targets)
    if target_kind is TargetKind.HARD and targets.ndim == 1:
        targets = one_hot(targets, logits.shape[1], logits.dtype)
    targets = targets.astype(logits.dtype, copy=False)
    if targets.shape != logits.shape:
        raise DimensionError(f"targets {targets.shape} vs logits {logits.shape}")
    p = softmax(logits)
    return cross_entropy(logits, targets), (p - targets) / logits.shape[0]


def backward(net, cache, targets, target_kind=TargetKind.HARD):
    """Gradients of the mean cross-entropy w.r.t. every weighted layer.

    Hard targets are integer labels (or one-hot rows); soft targets are
    probability rows used as fixed distillation labels.
    """
    if cache.net_id != id(net) or cache.version != net.version:
        raise StaleCacheError("forward cache does not match the current network weights")
    loss, delta = loss_gradient(cache.logits, targets, target_kind)
    gw = [None] * len(cache.weights)
    gb = [None] * len(cache.weights)
    k = len(cache.weights) - 1
    for i in range(len(net.layers) - 1, -1, -1):
        spec = net.layers[i]
        x = cache.inputs[i]
        if spec.kind is LayerKind.FC:
            w = cache.weights[k]
            gw[k] = delta.T @ x
            if cache.biases[k] is not None:
                gb[k] = delta.sum(axis=0)
            if i > 0:
                delta = delta @ w
            k -= 1
        elif spec.kind is LayerKind.CONV:
            w = cache.weights[k]
            n = x.shape[0]
            d = delta.reshape(-1, spec.out_channels)
            gw[k] = d.T @ cache.cols[i]
            if cache.biases[k] is not None:
                gb[k] = d.sum(axis=0)
            if i > 0:
                dcols = d @ w
                delta = col2im(dcols, (n, spec.in_h, spec.in_w, spec.in_channels),
                               spec.kernel_h, spec.kernel_w, spec.stride,
                               spec.padding).reshape(n, -1)
            k -= 1
        elif spec.kind is LayerKind.RELU:
            delta = delta * (x > 0)
    return Gradients(gw, gb, loss)


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    total_steps: int = 1000

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")


def cosine_lr(step_index, cfg):
    if not 0 <= step_index < cfg.total_steps:
        raise ScheduleExhaustedError(
            f"step {step_index} outside schedule of {cfg.total_steps} steps")
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * step_index / cfg.total_steps))


def sgd_step(net, step_index, cfg):
    """Apply the accumulated gradient: v = mu*v + G; theta -= lr*(v + wd*theta)."""
    lr = net.dtype.type(cosine_lr(step_index, cfg))
    mu = net.dtype.type(cfg.momentum)
    wd = net.dtype.type(cfg.weight_decay)
    params = list(zip(net.weights, net.grad, net.momentum))
    params += [(b, g, v) for b, g, v in zip(net.biases, net.grad_bias, net.momentum_bias)
               if b is not None]
    for theta, g, v in params:
        v *= mu
        v += g
        theta -= lr * (v + wd * theta)
    net.version += 1
    return float(lr)


def predict_logits(net, x, weights=None):
    return forward(net, x, weights)[0]

"""Minimal dense tensor engine.

Tensors are plain numpy arrays in NCHW layout.  Storage is float32; the
reductions that feed tests (squared distances, finite differences) run in
float64.  Convolution uses cross-correlation semantics (no kernel flip), the
same convention as the common deep-learning frameworks.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor extents do not line up."""


class Activation(enum.IntEnum):
    IDENTITY = 0
    RELU = 1


def as_tensor(values, dtype=DTYPE) -> np.ndarray:
    return np.ascontiguousarray(values, dtype=dtype)


def activate(pre: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == Activation.RELU:
        return np.maximum(pre, 0)
    return pre


def activation_grad(pre: np.ndarray, grad: np.ndarray, activation: Activation) -> np.ndarray:
    # ReLU subgradient at 0 is 0
    if activation == Activation.RELU:
        return grad * (pre > 0)
    return grad


@dataclass
class ConvLayer:
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    activation: Activation = Activation.RELU

    def __post_init__(self):
        self.activation = Activation(self.activation)
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-d, got shape {self.weights.shape}")
        out_c, _, kh, kw = self.weights.shape
        if (kh, kw) not in ((1, 1), (3, 3)):
            raise ShapeError(f"unsupported kernel extent {kh}x{kw}; only 1x1 and 3x3")
        if self.bias.shape != (out_c,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {out_c} output channels")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid stride/padding {self.stride}/{self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    @property
    def is_3x3(self) -> bool:
        return self.kernel_size == (3, 3)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel_size
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"input {h}x{w} with padding {self.padding} is smaller than kernel {kh}x{kw}"
            )
        return oh, ow

    def replace(self, **changes) -> "ConvLayer":
        fields = dict(weights=self.weights, bias=self.bias, stride=self.stride,
                      padding=self.padding, activation=self.activation)
        fields.update(changes)
        return ConvLayer(**fields)


@dataclass
class DenseLayer:
    """Fully connected classifier head, weights shaped (out, in)."""

    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        self.activation = Activation(self.activation)
        if self.weights.ndim != 2:
            raise ShapeError(f"dense weights must be 2-d, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("dense bias length does not match output features")


@dataclass
class ConvModel:
    layers: list[ConvLayer]
    input_shape: Optional[tuple[int, int, int]] = None
    classifier: Optional[DenseLayer] = None
    # optional per-channel normalization applied after the 1/255 scaling
    norm_mean: Optional[np.ndarray] = None
    norm_std: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.input_shape is not None:
            self.input_shape = tuple(int(v) for v in self.input_shape)
            self.layer_shapes()

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        """Output (C, H, W) of each conv layer; validates channel chaining."""
        if self.input_shape is None:
            raise ShapeError("model has no input shape")
        c, h, w = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            if layer.in_channels != c:
                raise ShapeError(
                    f"layer {i} expects {layer.in_channels} input channels, previous produces {c}"
                )
            h, w = layer.output_hw(h, w)
            c = layer.out_channels
            shapes.append((c, h, w))
        if self.classifier is not None and self.classifier.weights.shape[1] != c * h * w:
            raise ShapeError(
                f"classifier expects {self.classifier.weights.shape[1]} features, got {c * h * w}"
            )
        return shapes

    def copy(self) -> "ConvModel":
        clf = None
        if self.classifier is not None:
            clf = DenseLayer(self.classifier.weights.copy(), self.classifier.bias.copy(),
                             self.classifier.activation)
        return ConvModel(
            layers=[l.replace(weights=l.weights.copy(), bias=l.bias.copy()) for l in self.layers],
            input_shape=self.input_shape,
            classifier=clf,
            norm_mean=self.norm_mean,
            norm_std=self.norm_std,
            extra=dict(self.extra),
        )

    def preprocess(self, images_u8: np.ndarray) -> np.ndarray:
        """Scale raw 0..255 pixels into [0, 1], then normalize if the model says so."""
        x = images_u8.astype(DTYPE) / DTYPE(255.0)
        if self.norm_mean is not None:
            mean = np.asarray(self.norm_mean, dtype=DTYPE).reshape(1, -1, 1, 1)
            std = np.asarray(self.norm_std, dtype=DTYPE).reshape(1, -1, 1, 1)
            x = (x - mean) / std
        return x

    def features(self, x: np.ndarray, upto: Optional[int] = None) -> np.ndarray:
        """Run conv layers [0, upto) on x."""
        for layer in self.layers[:upto]:
            x = conv2d_forward(x, layer)
        return x

    def logits(self, x: np.ndarray) -> np.ndarray:
        feats = self.features(x)
        if self.classifier is None:
            raise ShapeError("model has no classifier")
        return dense_forward(feats.reshape(feats.shape[0], -1), self.classifier)


def _check_input(x: np.ndarray, layer: ConvLayer) -> None:
    if x.ndim != 4:
        raise ShapeError(f"conv input must be N x C x H x W, got shape {x.shape}")
    if x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels but layer expects {layer.in_channels}"
        )
    layer.output_hw(x.shape[2], x.shape[3])


def pad_input(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Patches as a (N*OH*OW, C*kh*kw) matrix, row-major over (n, oh, ow)."""
    xp = pad_input(x, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int,
           out_hw: tuple[int, int]) -> np.ndarray:
    n, c, h, w = x_shape
    oh, ow = out_hw
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    gx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return gx


def conv2d_preactivation(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    _check_input(x, layer)
    kh, kw = layer.kernel_size
    oh, ow = layer.output_hw(x.shape[2], x.shape[3])
    cols = im2col(x, kh, kw, layer.stride, layer.padding)
    wmat = layer.weights.reshape(layer.out_channels, -1).astype(x.dtype, copy=False)
    out = cols @ wmat.T + layer.bias.astype(x.dtype, copy=False)
    return np.ascontiguousarray(out.reshape(x.shape[0], oh, ow, -1).transpose(0, 3, 1, 2))


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """sigma(W * x + b) with output extent floor((H + 2p - k) / s) + 1."""
    return activate(conv2d_preactivation(x, layer), layer.activation)


def conv2d_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray):
    """Gradients (weights, bias, input) of a scalar loss given dL/d(output)."""
    _check_input(x, layer)
    kh, kw = layer.kernel_size
    oh, ow = layer.output_hw(x.shape[2], x.shape[3])
    expected = (x.shape[0], layer.out_channels, oh, ow)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    cols = im2col(x, kh, kw, layer.stride, layer.padding)
    wmat = layer.weights.reshape(layer.out_channels, -1).astype(x.dtype, copy=False)
    pre = (cols @ wmat.T + layer.bias.astype(x.dtype, copy=False))
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, layer.out_channels)
    g = activation_grad(pre, g, layer.activation)
    grad_w = (g.T @ cols).reshape(layer.weights.shape)
    grad_b = g.sum(axis=0)
    grad_x = col2im(g @ wmat, x.shape, kh, kw, layer.stride, layer.padding, (oh, ow))
    return grad_w, grad_b, grad_x


def dense_forward(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.weights.shape[1]:
        raise ShapeError(f"dense input {x.shape} incompatible with weights {layer.weights.shape}")
    return activate(x @ layer.weights.T + layer.bias, layer.activation)


def dense_backward(x: np.ndarray, layer: DenseLayer, grad_out: np.ndarray):
    pre = x @ layer.weights.T + layer.bias
    g = activation_grad(pre, grad_out, layer.activation)
    return g.T @ x, g.sum(axis=0), g @ layer.weights


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), (grad / n).astype(logits.dtype)


def frobenius_distance_sq(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of squared differences, accumulated in float64."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.dot(d.ravel(), d.ravel()))


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float,
             mask: Optional[np.ndarray] = None) -> np.ndarray:
    """params - lr * (grads * mask).  Positions with mask == 0 are left bit-identical."""
    if params.shape != grads.shape:
        raise ShapeError(f"params {params.shape} vs grads {grads.shape}")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    step = params.dtype.type(lr) * grads.astype(params.dtype, copy=False)
    if mask is None:
        return params - step
    if mask.shape != params.shape:
        raise ShapeError(f"mask {mask.shape} vs params {params.shape}")
    # np.where keeps frozen entries exactly, even for -0.0 or NaN-free rounding quirks
    return np.where(mask != 0, params - step, params)


def check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")

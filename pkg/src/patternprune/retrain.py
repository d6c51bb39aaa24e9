"""User-side training: masked fine-tuning, a toy labeled task and its file container.

This is the only module that handles labeled data.  The pruner never imports it.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .modelio import FormatError
from .tensor import (
    ConvModel,
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    softmax_cross_entropy,
)


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) uint8
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise ShapeError(f"images must be N x C x H x W uint8, got {self.images.dtype} "
                             f"{self.images.shape}")
        if self.labels.shape != (len(self.images),):
            raise ShapeError(f"{len(self.labels)} labels for {len(self.images)} images")

    def __len__(self):
        return len(self.labels)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return (Dataset(self.images[:n_first], self.labels[:n_first]),
                Dataset(self.images[n_first:], self.labels[n_first:]))


def dataset_to_bytes(ds: Dataset) -> bytes:
    """u32 count, then per sample a u16 label followed by the raw image bytes."""
    if np.any(ds.labels < 0) or np.any(ds.labels > 0xFFFF):
        raise ValueError("labels must fit in u16")
    parts = [struct.pack("<I", len(ds))]
    for img, label in zip(ds.images, ds.labels):
        parts.append(struct.pack("<H", int(label)))
        parts.append(np.ascontiguousarray(img).tobytes())
    return b"".join(parts)


def dataset_from_bytes(buf: bytes, image_shape) -> Dataset:
    image_shape = tuple(int(v) for v in image_shape)
    if len(buf) < 4:
        raise FormatError(f"dataset: truncated count at byte {len(buf)}")
    (count,) = struct.unpack_from("<I", buf, 0)
    size = int(np.prod(image_shape))
    record = 2 + size
    expected = 4 + count * record
    if len(buf) != expected:
        where = min(len(buf), expected)
        raise FormatError(f"dataset: {count} samples of shape {image_shape} need {expected} "
                          f"bytes, file has {len(buf)} (mismatch at byte {where})")
    raw = np.frombuffer(buf, dtype=np.uint8, offset=4).reshape(count, record)
    labels = raw[:, :2].copy().view("<u2").ravel().astype(np.int64)
    images = raw[:, 2:].reshape((count,) + image_shape).copy()
    return Dataset(images, labels)


def synthetic_two_class(n: int, image_shape=(3, 16, 16), seed: int = 0) -> Dataset:
    """Oriented-grating task.

    Every image is a sinusoidal grating with random period (3 to 6 pixels),
    phase, contrast and per-channel tint, plus uniform pixel noise.  Label 0
    gratings vary along rows (horizontal stripes), label 1 along columns.
    Labels alternate so any prefix is balanced.
    """
    rng = np.random.default_rng(seed)
    c, h, w = image_shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.arange(n) % 2
    period = rng.uniform(3.0, 6.0, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    contrast = rng.uniform(40.0, 90.0, n)
    tint = rng.uniform(0.5, 1.0, (n, c))
    noise = rng.uniform(-40.0, 40.0, (n, c, h, w))
    coord = np.where(labels[:, None, None] == 0, yy[None], xx[None])
    wave = np.sin(2 * np.pi * coord / period[:, None, None] + phase[:, None, None])
    img = 128.0 + (contrast[:, None, None, None] * tint[:, :, None, None] * wave[:, None]) + noise
    images = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Dataset(images, labels)


def _forward(model: ConvModel, x: np.ndarray):
    acts = [x]
    for layer in model.layers:
        acts.append(conv2d_forward(acts[-1], layer))
    feats = acts[-1].reshape(len(x), -1)
    return acts, feats, dense_forward(feats, model.classifier)


def accuracy(model: ConvModel, ds: Dataset, batch_size: int = 256) -> float:
    correct = 0
    for start in range(0, len(ds), batch_size):
        x = model.preprocess(ds.images[start:start + batch_size])
        pred = np.argmax(model.logits(x), axis=1)
        correct += int(np.sum(pred == ds.labels[start:start + batch_size]))
    return correct / len(ds)


def _check_masks(model: ConvModel, masks: dict[int, np.ndarray]) -> None:
    for i, mask in masks.items():
        if not 0 <= i < len(model.layers):
            raise ShapeError(f"mask for layer {i}, model has {len(model.layers)} conv layers")
        if mask.shape != model.layers[i].weights.shape:
            raise ShapeError(f"mask {mask.shape} does not match layer {i} weights "
                             f"{model.layers[i].weights.shape}")


def train(model: ConvModel, ds: Dataset, epochs: int, lr: float,
          masks: Optional[dict[int, np.ndarray]] = None, batch_size: int = 32,
          momentum: float = 0.9, seed: int = 0,
          on_epoch: Optional[Callable[[int, float], None]] = None) -> ConvModel:
    """Minibatch cross-entropy SGD with momentum; returns a trained copy.

    Conv layers listed in ``masks`` get their gradient multiplied by the mask,
    and masked-out weights are never written, so they stay bitwise unchanged.
    ``on_epoch(epoch, mean_loss)`` is called after each epoch.
    """
    if model.classifier is None:
        raise ShapeError("training needs a classifier layer")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    masks = masks or {}
    _check_masks(model, masks)
    model = model.copy()
    if epochs == 0:
        return model
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    rng = np.random.default_rng(seed)
    keep = {i: m != 0 for i, m in masks.items()}
    params = [(layer, "weights") for layer in model.layers] + \
             [(layer, "bias") for layer in model.layers] + \
             [(model.classifier, "weights"), (model.classifier, "bias")]
    velocity = [np.zeros_like(getattr(obj, name)) for obj, name in params]
    mu = np.float32(momentum)
    for epoch in range(epochs):
        order = rng.permutation(len(ds))
        losses = []
        for start in range(0, len(ds), batch_size):
            idx = order[start:start + batch_size]
            x = model.preprocess(ds.images[idx])
            acts, feats, logits = _forward(model, x)
            loss, g = softmax_cross_entropy(logits, ds.labels[idx])
            losses.append(loss)
            gw_c, gb_c, g_feats = dense_backward(feats, model.classifier, g)
            grads_w, grads_b = [None] * len(model.layers), [None] * len(model.layers)
            g = g_feats.reshape(acts[-1].shape)
            for i in range(len(model.layers) - 1, -1, -1):
                grads_w[i], grads_b[i], g = conv2d_backward(acts[i], model.layers[i], g)
            for i in keep:
                grads_w[i] = grads_w[i] * masks[i]
            grads = grads_w + grads_b + [gw_c, gb_c]
            for j, ((obj, name), grad) in enumerate(zip(params, grads)):
                v = velocity[j]
                v *= mu
                v += grad.astype(np.float32)
                step = getattr(obj, name) - np.float32(lr) * v
                if name == "weights" and j < len(model.layers) and j in keep:
                    step = np.where(keep[j], step, getattr(obj, name))
                setattr(obj, name, step.astype(np.float32))
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(losses)))
    return model


def masked_retrain(model: ConvModel, masks: dict[int, np.ndarray], dataset: Dataset,
                   epochs: int, lr: float, **kwargs) -> ConvModel:
    """Fine-tune with every pruned weight frozen at its current value (zero)."""
    return train(model, dataset, epochs, lr, masks=masks, **kwargs)

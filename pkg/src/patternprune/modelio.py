"""Binary containers: dense models (PPDM) and pruning masks (PPMK).

All integers and floats are little-endian.  Bitmaps are packed filter-major,
least significant bit first within each byte.

PPDM v1::

    b"PPDM" u16 version u16 layer_count
    per layer: u8 kind (0 conv, 1 dense) u32[4] weight shape
               u8 stride u8 padding u8 activation (0 identity, 1 relu)
               f32 weights (row-major) f32 bias
    optional:  b"META" u32 length, UTF-8 JSON {input_shape, norm_mean, norm_std}

PPMK v1::

    b"PPMK" u16 version, pattern library (u8 m, u16 codes), u16 entry_count
    per entry: u16 layer u32 out u32 in u8 kind (0 pattern+keep, 1 keep only)
               keep bitmap, then for kind 0 one u8 pattern index per kept kernel
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .patterns import PatternLibrary
from .tensor import Activation, ConvLayer, ConvModel, DenseLayer

PPDM_MAGIC = b"PPDM"
PPMK_MAGIC = b"PPMK"
META_MAGIC = b"META"
VERSION = 1

KIND_CONV = 0
KIND_DENSE = 1


class FormatError(ValueError):
    """Malformed container; the message names the byte offset."""


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the target directory and rename over the target."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.what}: truncated at byte {self.pos} (need {n} bytes, "
                f"{len(self.buf) - self.pos} left)"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.pos


def model_to_bytes(model: ConvModel) -> bytes:
    entries = [(KIND_CONV, layer) for layer in model.layers]
    if model.classifier is not None:
        entries.append((KIND_DENSE, model.classifier))
    out = [PPDM_MAGIC, struct.pack("<HH", VERSION, len(entries))]
    for kind, layer in entries:
        w = np.asarray(layer.weights, dtype="<f4")
        shape = w.shape if kind == KIND_CONV else (w.shape[0], w.shape[1], 1, 1)
        stride = layer.stride if kind == KIND_CONV else 1
        padding = layer.padding if kind == KIND_CONV else 0
        out.append(struct.pack("<B4IBBB", kind, *shape, stride, padding, int(layer.activation)))
        out.append(w.tobytes())
        out.append(np.asarray(layer.bias, dtype="<f4").tobytes())
    meta = {}
    if model.input_shape is not None:
        meta["input_shape"] = list(model.input_shape)
    if model.norm_mean is not None:
        meta["norm_mean"] = [float(v) for v in model.norm_mean]
        meta["norm_std"] = [float(v) for v in model.norm_std]
    if meta:
        blob = json.dumps(meta, sort_keys=True).encode()
        out.append(META_MAGIC + struct.pack("<I", len(blob)) + blob)
    return b"".join(out)


def model_from_bytes(buf: bytes) -> ConvModel:
    r = _Reader(buf, "PPDM")
    if r.take(4) != PPDM_MAGIC:
        raise FormatError("PPDM: bad magic at byte 0")
    version, count = r.unpack("HH")
    if version != VERSION:
        raise FormatError(f"PPDM: unsupported version {version} at byte 4")
    layers, classifier = [], None
    for i in range(count):
        start = r.pos
        kind, o, c, kh, kw, stride, padding, act = r.unpack("B4IBBB")
        if act not in (0, 1):
            raise FormatError(f"PPDM: unknown activation {act} in layer {i} at byte {start}")
        weights = r.floats(o * c * kh * kw)
        bias = r.floats(o)
        if kind == KIND_CONV:
            if classifier is not None:
                raise FormatError(f"PPDM: conv layer after dense layer at byte {start}")
            layers.append(ConvLayer(weights.reshape(o, c, kh, kw), bias, stride, padding,
                                    Activation(act)))
        elif kind == KIND_DENSE:
            if classifier is not None:
                raise FormatError(f"PPDM: more than one dense layer at byte {start}")
            classifier = DenseLayer(weights.reshape(o, c), bias, Activation(act))
        else:
            raise FormatError(f"PPDM: unknown layer kind {kind} at byte {start}")
    meta = {}
    if r.remaining:
        start = r.pos
        if r.take(4) != META_MAGIC:
            raise FormatError(f"PPDM: unexpected trailing bytes at byte {start}")
        (n,) = r.unpack("I")
        meta = json.loads(r.take(n).decode())
        if r.remaining:
            raise FormatError(f"PPDM: unexpected trailing bytes at byte {r.pos}")
    return ConvModel(
        layers=layers,
        input_shape=tuple(meta["input_shape"]) if "input_shape" in meta else None,
        classifier=classifier,
        norm_mean=np.asarray(meta["norm_mean"], np.float32) if "norm_mean" in meta else None,
        norm_std=np.asarray(meta["norm_std"], np.float32) if "norm_std" in meta else None,
    )


def save_model(model: ConvModel, path) -> None:
    atomic_write(path, model_to_bytes(model))


def load_model(path) -> ConvModel:
    return model_from_bytes(Path(path).read_bytes())


def pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=bool).ravel(), bitorder="little").tobytes()


def unpack_bits(buf: bytes, count: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(buf, np.uint8), count=count, bitorder="little").astype(bool)


@dataclass
class LayerMask:
    """Pruning decision of one conv layer.

    ``keep`` is an (out, in) bool bitmap; ``pattern_indices`` is (out, in) with
    the library index of each kernel, or None for layers pruned only at the
    kernel level (1x1 convolutions).
    """

    layer: int
    keep: np.ndarray
    pattern_indices: Optional[np.ndarray] = None

    def weight_mask(self, library: PatternLibrary, kernel_size) -> np.ndarray:
        out_c, in_c = self.keep.shape
        if self.pattern_indices is not None:
            mask = library.masks[self.pattern_indices]
        else:
            mask = np.ones((out_c, in_c) + tuple(kernel_size), dtype=np.float32)
        return (mask * self.keep[:, :, None, None]).astype(np.float32)


def masks_to_bytes(library: PatternLibrary, masks: list[LayerMask]) -> bytes:
    out = [PPMK_MAGIC, struct.pack("<H", VERSION), library.to_bytes(),
           struct.pack("<H", len(masks))]
    for lm in masks:
        out_c, in_c = lm.keep.shape
        kind = 0 if lm.pattern_indices is not None else 1
        out.append(struct.pack("<HIIB", lm.layer, out_c, in_c, kind))
        out.append(pack_bits(lm.keep))
        if kind == 0:
            out.append(np.asarray(lm.pattern_indices[lm.keep], dtype=np.uint8).tobytes())
    return b"".join(out)


def masks_from_bytes(buf: bytes) -> tuple[PatternLibrary, list[LayerMask]]:
    r = _Reader(buf, "PPMK")
    if r.take(4) != PPMK_MAGIC:
        raise FormatError("PPMK: bad magic at byte 0")
    (version,) = r.unpack("H")
    if version != VERSION:
        raise FormatError(f"PPMK: unsupported version {version} at byte 4")
    try:
        library, r.pos = PatternLibrary.from_bytes(buf, r.pos)
    except ValueError as exc:
        raise FormatError(f"PPMK: {exc}") from exc
    (count,) = r.unpack("H")
    masks = []
    for _ in range(count):
        start = r.pos
        layer, out_c, in_c, kind = r.unpack("HIIB")
        keep = unpack_bits(r.take((out_c * in_c + 7) // 8), out_c * in_c).reshape(out_c, in_c)
        indices = None
        if kind == 0:
            kept = int(keep.sum())
            raw = np.frombuffer(r.take(kept), np.uint8)
            if raw.size and raw.max() >= len(library):
                raise FormatError(f"PPMK: pattern index out of range in entry at byte {start}")
            indices = np.zeros((out_c, in_c), dtype=np.int64)
            indices[keep] = raw
        elif kind != 1:
            raise FormatError(f"PPMK: unknown entry kind {kind} at byte {start}")
        masks.append(LayerMask(layer, keep, indices))
    if r.remaining:
        raise FormatError(f"PPMK: unexpected trailing bytes at byte {r.pos}")
    return library, masks

"""FKW: pattern-indexed compressed storage for pattern-pruned 3x3 layers.

Layout (little-endian)::

    b"FKW1" u16 version
    u32 out_channels u32 in_channels u8 kh u8 kw
    pattern library: u8 m, m x u16 codes
    u32[out] filter permutation (execution order -> original filter)
    keep bitmap: out*in bits, filter-major, LSB first
    pattern indices: for each filter in execution order, ceil(log2 m) bits per
        kept kernel in ascending channel order, padded to a byte per filter
    f32 values: 4 per kept kernel, filters in execution order, kernels in
        (pattern, channel) order, cells center-first then row-major

The within-filter kernel order is not stored; it is recomputed from the keep
bitmap and pattern indices.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..modelio import FormatError, pack_bits, unpack_bits
from ..patterns import PatternLibrary
from .plan import ReorderPlan, build_reorder_plan, plan_with_permutation

MAGIC = b"FKW1"
VERSION = 1
HEADER = struct.Struct("<4sHIIBB")


class IntegrityError(ValueError):
    """Weights do not agree with the recorded patterns or keep bitmap."""


@dataclass
class CompressedWeights:
    library: PatternLibrary
    out_channels: int
    in_channels: int
    keep: np.ndarray
    pattern_indices: np.ndarray
    plan: ReorderPlan
    values: np.ndarray  # (kept, 4) float32 in plan order

    @property
    def kept(self) -> int:
        return int(self.keep.sum())

    def _index_section(self) -> bytes:
        bits = self.library.index_bits
        out = []
        for f in self.plan.filter_permutation:
            idx = self.pattern_indices[f][self.keep[f]]
            if bits == 0 or idx.size == 0:
                continue
            planes = (idx[:, None] >> np.arange(bits)) & 1
            out.append(pack_bits(planes.ravel()))
        return b"".join(out)

    def section_sizes(self) -> dict[str, int]:
        n = self.out_channels * self.in_channels
        bits = self.library.index_bits
        index_bytes = sum((bits * int(self.keep[f].sum()) + 7) // 8
                          for f in range(self.out_channels))
        return {
            "header": HEADER.size,
            "library": 1 + 2 * len(self.library),
            "plan": 4 * self.out_channels,
            "bitmap": (n + 7) // 8,
            "indices": index_bytes,
            "values": 16 * self.kept,
        }

    @property
    def nbytes(self) -> int:
        return sum(self.section_sizes().values())

    @property
    def storage_bytes(self) -> int:
        """Per-layer weight storage: everything except file header and library."""
        s = self.section_sizes()
        return s["plan"] + s["bitmap"] + s["indices"] + s["values"]

    @property
    def payload_bytes(self) -> int:
        s = self.section_sizes()
        return s["indices"] + s["values"]

    def with_plan(self, plan: ReorderPlan) -> "CompressedWeights":
        """Same weights with values rearranged to follow ``plan``."""
        row = {}
        k = 0
        for f, order in zip(self.plan.filter_permutation, self.plan.kernel_order):
            for c in order:
                row[(int(f), int(c))] = k
                k += 1
        rows = [row[(int(f), int(c))] for f, order in zip(plan.filter_permutation,
                                                           plan.kernel_order) for c in order]
        values = self.values[rows] if rows else self.values.copy()
        return CompressedWeights(self.library, self.out_channels, self.in_channels, self.keep,
                                 self.pattern_indices, plan, values)

    def canonical(self) -> "CompressedWeights":
        """Kernels in the stored (pattern, channel) order, keeping the filter order."""
        plan = plan_with_permutation(self.keep, self.pattern_indices,
                                     self.plan.filter_permutation)
        same = all(np.array_equal(a, b) for a, b in zip(plan.kernel_order,
                                                         self.plan.kernel_order))
        return self if same else self.with_plan(plan)

    def to_bytes(self) -> bytes:
        if self.canonical() is not self:
            return self.canonical().to_bytes()
        buf = b"".join([
            HEADER.pack(MAGIC, VERSION, self.out_channels, self.in_channels, 3, 3),
            self.library.to_bytes(),
            np.asarray(self.plan.filter_permutation, dtype="<u4").tobytes(),
            pack_bits(self.keep),
            self._index_section(),
            np.asarray(self.values, dtype="<f4").tobytes(),
        ])
        assert len(buf) == self.nbytes
        return buf

    @classmethod
    def from_bytes(cls, buf: bytes) -> "CompressedWeights":
        return parse_fkw(buf)


def encode_fkw(weights: np.ndarray, keep, pattern_indices, library: PatternLibrary,
               plan: ReorderPlan | None = None) -> CompressedWeights:
    weights = np.asarray(weights, dtype=np.float32)
    if weights.ndim != 4 or weights.shape[2:] != (3, 3):
        raise IntegrityError(f"FKW needs out x in x 3 x 3 weights, got {weights.shape}")
    keep = np.asarray(keep, dtype=bool)
    pattern_indices = np.where(keep, np.asarray(pattern_indices), 0).astype(np.int64)
    if keep.shape != weights.shape[:2]:
        raise IntegrityError(f"keep bitmap {keep.shape} does not match weights {weights.shape}")
    if np.any(pattern_indices >= len(library)) or np.any(pattern_indices < 0):
        raise IntegrityError("pattern index outside the library")
    mask = library.masks[pattern_indices] * keep[:, :, None, None]
    bad = np.argwhere((mask == 0) & (weights != 0))
    if len(bad):
        o, i = bad[0][:2]
        raise IntegrityError(
            f"kernel ({o}, {i}) has weights outside pattern {pattern_indices[o, i]}"
            + ("" if keep[o, i] else " (kernel is marked pruned)")
        )
    if plan is None:
        plan = build_reorder_plan(keep, pattern_indices)
    orders = [library[p].storage_order for p in range(len(library))]
    values = []
    for f, order in zip(plan.filter_permutation, plan.kernel_order):
        for c in order:
            flat = weights[f, c].reshape(9)
            values.append(flat[list(orders[pattern_indices[f, c]])])
    values = np.asarray(values, dtype=np.float32).reshape(-1, 4)
    return CompressedWeights(library, weights.shape[0], weights.shape[1], keep,
                             pattern_indices, plan, values)


def parse_fkw(buf: bytes) -> CompressedWeights:
    if len(buf) < HEADER.size:
        raise FormatError(f"FKW: truncated header at byte {len(buf)}")
    magic, version, out_c, in_c, kh, kw = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError("FKW: bad magic at byte 0")
    if version != VERSION:
        raise FormatError(f"FKW: unsupported version {version} at byte 4")
    if (kh, kw) != (3, 3):
        raise FormatError(f"FKW: kernel extent {kh}x{kw} at byte 14 is not 3x3")
    pos = HEADER.size
    try:
        library, pos = PatternLibrary.from_bytes(buf, pos)
    except ValueError as exc:
        raise FormatError(f"FKW: {exc}") from exc

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"FKW: truncated {what} section at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    perm = np.frombuffer(take(4 * out_c, "plan"), dtype="<u4").astype(np.int64)
    if sorted(perm.tolist()) != list(range(out_c)):
        raise FormatError(f"FKW: filter permutation at byte {pos - 4 * out_c} is not a bijection")
    n = out_c * in_c
    keep = unpack_bits(take((n + 7) // 8, "bitmap"), n).reshape(out_c, in_c)
    bits = library.index_bits
    indices = np.zeros((out_c, in_c), dtype=np.int64)
    for f in perm:
        chans = np.flatnonzero(keep[f])
        nbytes = (bits * len(chans) + 7) // 8
        if nbytes == 0:
            continue
        start = pos
        raw = unpack_bits(take(nbytes, "index"), bits * len(chans)).reshape(len(chans), bits)
        idx = (raw.astype(np.int64) << np.arange(bits)).sum(axis=1)
        if np.any(idx >= len(library)):
            raise FormatError(f"FKW: pattern index out of range in filter {f} at byte {start}")
        indices[f, chans] = idx
    kept = int(keep.sum())
    values = np.frombuffer(take(16 * kept, "value"), dtype="<f4").astype(np.float32)
    if pos != len(buf):
        raise FormatError(f"FKW: {len(buf) - pos} unexpected trailing bytes at byte {pos}")
    plan = plan_with_permutation(keep, indices, perm)
    return CompressedWeights(library, out_c, in_c, keep, indices, plan, values.reshape(-1, 4))


def decode_fkw(cw) -> np.ndarray:
    """Dense out x in x 3 x 3 float32 weights, zeros off-pattern."""
    if isinstance(cw, (bytes, bytearray, memoryview)):
        cw = parse_fkw(bytes(cw))
    dense = np.zeros((cw.out_channels, cw.in_channels, 9), dtype=np.float32)
    orders = [cw.library[p].storage_order for p in range(len(cw.library))]
    k = 0
    for f, order in zip(cw.plan.filter_permutation, cw.plan.kernel_order):
        for c in order:
            dense[f, c, list(orders[cw.pattern_indices[f, c]])] = cw.values[k]
            k += 1
    return dense.reshape(cw.out_channels, cw.in_channels, 3, 3)


BUNDLE_MAGIC = b"FKWB"
BUNDLE_HEADER = struct.Struct("<4sHH")
BUNDLE_ENTRY = struct.Struct("<HI")


def bundle_to_bytes(layers: dict[int, CompressedWeights]) -> bytes:
    """Several FKW layers in one file: magic, u16 version, u16 count, then per
    layer a u16 model layer index, a u32 length and the FKW bytes."""
    parts = [BUNDLE_HEADER.pack(BUNDLE_MAGIC, VERSION, len(layers))]
    for index in sorted(layers):
        blob = layers[index].to_bytes()
        parts.append(BUNDLE_ENTRY.pack(index, len(blob)))
        parts.append(blob)
    return b"".join(parts)


def bundle_from_bytes(buf: bytes) -> dict[int, CompressedWeights]:
    if len(buf) < BUNDLE_HEADER.size:
        raise FormatError(f"FKW bundle: truncated header at byte {len(buf)}")
    magic, version, count = BUNDLE_HEADER.unpack_from(buf, 0)
    if magic != BUNDLE_MAGIC:
        raise FormatError("FKW bundle: bad magic at byte 0")
    if version != VERSION:
        raise FormatError(f"FKW bundle: unsupported version {version} at byte 4")
    pos = BUNDLE_HEADER.size
    layers = {}
    for _ in range(count):
        if pos + BUNDLE_ENTRY.size > len(buf):
            raise FormatError(f"FKW bundle: truncated entry header at byte {pos}")
        index, length = BUNDLE_ENTRY.unpack_from(buf, pos)
        pos += BUNDLE_ENTRY.size
        if pos + length > len(buf):
            raise FormatError(f"FKW bundle: layer {index} truncated at byte {pos}")
        if index in layers:
            raise FormatError(f"FKW bundle: duplicate layer {index} at byte {pos}")
        try:
            layers[index] = parse_fkw(buf[pos:pos + length])
        except FormatError as exc:
            raise FormatError(f"FKW bundle: layer {index} at byte {pos}: {exc}") from exc
        pos += length
    if pos != len(buf):
        raise FormatError(f"FKW bundle: {len(buf) - pos} trailing bytes at byte {pos}")
    return layers

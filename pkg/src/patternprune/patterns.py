"""Kernel patterns, library extraction and per-kernel projection."""
from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CENTER = 4
NON_CENTER = (0, 1, 2, 3, 5, 6, 7, 8)
ENTRIES = 4
MAX_LIBRARY = 16


class PatternError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Pattern:
    """A 3x3 binary mask.  ``code`` has bit i set when row-major cell i is kept."""

    code: int

    def __post_init__(self):
        if not 0 <= self.code < 512:
            raise PatternError(f"pattern code {self.code} is not a 9-bit mask")
        if bin(self.code).count("1") != ENTRIES:
            raise PatternError(f"pattern {self.code:#011b} must keep exactly {ENTRIES} cells")
        if not self.code >> CENTER & 1:
            raise PatternError(f"pattern {self.code:#011b} must keep the center cell")

    @classmethod
    def from_cells(cls, cells: Iterable[int]) -> "Pattern":
        return cls(sum(1 << int(c) for c in set(cells)))

    @classmethod
    def from_mask(cls, mask) -> "Pattern":
        flat = np.asarray(mask).reshape(9)
        return cls.from_cells(np.flatnonzero(flat))

    @property
    def cells(self) -> tuple[int, ...]:
        return tuple(i for i in range(9) if self.code >> i & 1)

    @property
    def storage_order(self) -> tuple[int, ...]:
        """Center first, then the remaining kept cells row-major."""
        return (CENTER,) + tuple(c for c in self.cells if c != CENTER)

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(9, dtype=np.float32)
        m[list(self.cells)] = 1
        return m.reshape(3, 3)

    def __str__(self):
        rows = ["".join("x" if self.code >> (3 * r + c) & 1 else "." for c in range(3))
                for r in range(3)]
        return "/".join(rows)


ALL_PATTERNS = tuple(
    sorted(Pattern.from_cells((CENTER,) + t) for t in itertools.combinations(NON_CENTER, 3))
)


@dataclass
class PatternLibrary:
    patterns: list[Pattern]
    counts: list[int] = field(default_factory=list)
    pad_count: int = 0

    def __post_init__(self):
        self.patterns = [p if isinstance(p, Pattern) else Pattern(int(p)) for p in self.patterns]
        if not 1 <= len(self.patterns) <= MAX_LIBRARY:
            raise PatternError(f"library size {len(self.patterns)} outside 1..{MAX_LIBRARY}")
        if len(set(self.patterns)) != len(self.patterns):
            raise PatternError("library patterns must be distinct")

    def __len__(self):
        return len(self.patterns)

    def __getitem__(self, i) -> Pattern:
        return self.patterns[i]

    @property
    def codes(self) -> list[int]:
        return [p.code for p in self.patterns]

    @property
    def masks(self) -> np.ndarray:
        return np.stack([p.mask for p in self.patterns])

    @property
    def index_bits(self) -> int:
        return max(0, (len(self) - 1).bit_length())

    def to_bytes(self) -> bytes:
        return struct.pack(f"<B{len(self)}H", len(self), *self.codes)

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["PatternLibrary", int]:
        """Parse a serialized library; returns it with the offset just past it."""
        if offset + 1 > len(buf):
            raise PatternError(f"truncated pattern library at byte {offset}")
        m = buf[offset]
        end = offset + 1 + 2 * m
        if end > len(buf):
            raise PatternError(f"truncated pattern library at byte {offset}")
        codes = struct.unpack_from(f"<{m}H", buf, offset + 1)
        return cls(list(codes)), end


@dataclass
class KernelProjection:
    pattern_index: int
    masked_kernel: np.ndarray
    retained_norm_sq: float


def _as_kernels(kernels) -> np.ndarray:
    k = np.asarray(kernels)
    if k.shape[-2:] != (3, 3):
        raise PatternError(f"expected 3x3 kernels, got trailing shape {k.shape[-2:]}")
    return k.reshape(-1, 9)


def natural_codes(kernels) -> np.ndarray:
    """9-bit natural pattern code of every kernel (center + 3 largest |w| elsewhere)."""
    flat = np.abs(_as_kernels(kernels)[:, NON_CENTER])
    # stable sort keeps the lowest row-major index first among equal magnitudes
    top = np.argsort(-flat, axis=1, kind="stable")[:, :3]
    cells = np.asarray(NON_CENTER)[top]
    return (1 << CENTER) + np.sum(1 << cells, axis=1)


def natural_pattern(kernel) -> Pattern:
    return Pattern(int(natural_codes(kernel)[0]))


def conv_kernels(model) -> list[np.ndarray]:
    return [layer.weights for layer in model.layers if layer.is_3x3]


def pattern_frequencies(model) -> dict[int, int]:
    weights = conv_kernels(model)
    if not weights:
        raise PatternError("no pattern-eligible layers")
    codes = np.concatenate([natural_codes(w) for w in weights])
    values, counts = np.unique(codes, return_counts=True)
    return {int(v): int(c) for v, c in zip(values, counts)}


def extract_pattern_library(model, m: int) -> PatternLibrary:
    """Top-m natural patterns over every 3x3 kernel of the model.

    Frequency ties go to the smaller code.  When fewer than m distinct patterns
    occur, the library is padded with unused patterns in code order and
    ``pad_count`` records how many.
    """
    if not 1 <= m <= MAX_LIBRARY:
        raise PatternError(f"library size {m} outside 1..{MAX_LIBRARY}")
    freq = pattern_frequencies(model)
    ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))[:m]
    patterns = [Pattern(code) for code, _ in ranked]
    counts = [count for _, count in ranked]
    pad = 0
    for p in ALL_PATTERNS:
        if len(patterns) >= m:
            break
        if p not in patterns:
            patterns.append(p)
            counts.append(0)
            pad += 1
    return PatternLibrary(patterns, counts, pad)


def _cell_lists(library: PatternLibrary) -> list[tuple[int, ...]]:
    return [p.cells for p in library.patterns]


def retained_norms(kernels, library: PatternLibrary) -> np.ndarray:
    """||k * M_i||^2 for every kernel and pattern, (K, m) in float64.

    Cells are summed in ascending row-major order so results are reproducible
    by a plain loop over the masked kernel.
    """
    sq = np.square(_as_kernels(kernels).astype(np.float64))
    out = np.empty((sq.shape[0], len(library)))
    for i, cells in enumerate(_cell_lists(library)):
        acc = np.zeros(sq.shape[0])
        for c in cells:
            acc = acc + sq[:, c]
        out[:, i] = acc
    return out


def project_kernels(kernels, library: PatternLibrary):
    """Euclidean projection of every 3x3 kernel onto the library.

    Returns (pattern_indices, projected) where ``projected`` has the input's
    shape.  Ties go to the lowest pattern index.
    """
    kernels = np.asarray(kernels)
    flat = _as_kernels(kernels)
    idx = np.argmax(retained_norms(kernels, library), axis=1)
    masks = library.masks.reshape(len(library), 9).astype(flat.dtype)
    # np.where rather than a product so dropped cells are +0.0, never -0.0
    projected = np.where(masks[idx] != 0, flat, flat.dtype.type(0))
    return idx, projected.reshape(kernels.shape)


def project_kernel(kernel, library: PatternLibrary) -> KernelProjection:
    kernel = np.asarray(kernel)
    norms = retained_norms(kernel, library)[0]
    i = int(np.argmax(norms))
    return KernelProjection(i, apply_pattern(kernel, library[i]), float(norms[i]))


def apply_pattern(kernel, pattern: Pattern) -> np.ndarray:
    kernel = np.asarray(kernel)
    if kernel.shape != (3, 3):
        raise PatternError(f"expected a 3x3 kernel, got {kernel.shape}")
    return np.where(pattern.mask != 0, kernel, kernel.dtype.type(0))


def masks_from_indices(indices: np.ndarray, library: PatternLibrary) -> np.ndarray:
    """Expand per-kernel pattern indices of shape (O, I) into (O, I, 3, 3) masks."""
    return library.masks[np.asarray(indices)]


def conforms(weights: np.ndarray, indices: np.ndarray, library: PatternLibrary) -> bool:
    """True when every kernel is zero outside its recorded pattern."""
    return bool(np.all(weights[masks_from_indices(indices, library) == 0] == 0))


def library_from_codes(codes: Sequence[int]) -> PatternLibrary:
    return PatternLibrary([Pattern(int(c)) for c in codes])

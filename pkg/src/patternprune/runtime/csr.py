"""Conventional CSR baseline over the (filter, in*kh*kw) weight matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class CsrWeights:
    shape: tuple[int, int, int, int]
    row_ptr: np.ndarray  # int32, out + 1
    col_idx: np.ndarray  # int32, nnz
    values: np.ndarray  # float32, nnz

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def nbytes(self) -> int:
        return self.row_ptr.nbytes + self.col_idx.nbytes + self.values.nbytes

    def to_dense(self) -> np.ndarray:
        out_c = self.shape[0]
        dense = np.zeros((out_c, int(np.prod(self.shape[1:]))), dtype=np.float32)
        rows = np.repeat(np.arange(out_c), np.diff(self.row_ptr))
        dense[rows, self.col_idx] = self.values
        return dense.reshape(self.shape)

    def validate(self) -> None:
        cols = int(np.prod(self.shape[1:]))
        if self.row_ptr[0] != 0 or self.row_ptr[-1] != self.nnz:
            raise ValueError("row pointers do not span the value array")
        if np.any(np.diff(self.row_ptr) < 0):
            raise ValueError("row pointers are not monotone")
        if self.nnz and (self.col_idx.min() < 0 or self.col_idx.max() >= cols):
            raise ValueError("column index out of range")


def encode_csr(weights: np.ndarray) -> CsrWeights:
    w = np.asarray(weights, dtype=np.float32)
    mat = w.reshape(w.shape[0], -1)
    rows, cols = np.nonzero(mat)
    counts = np.bincount(rows, minlength=mat.shape[0])
    row_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
    return CsrWeights(tuple(w.shape), row_ptr, cols.astype(np.int32), mat[rows, cols].copy())

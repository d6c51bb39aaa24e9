"""Sparse convolution over FKW weights plus dense and CSR reference paths."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from ..tensor import Activation, ShapeError, activate, pad_input
from . import codegen
from .csr import CsrWeights
from .fkw import CompressedWeights
from .plan import ReorderPlan, plan_with_permutation


@dataclass
class _Schedule:
    perm: np.ndarray
    gptr: np.ndarray
    gpat: np.ndarray
    gstart: np.ndarray
    gend: np.ndarray
    chans: np.ndarray
    vals: np.ndarray


def _schedule(plan: ReorderPlan, values: np.ndarray) -> _Schedule:
    chans, gptr, gpat, gstart, gend = [], [0], [], [], []
    base = 0
    for order, groups in zip(plan.kernel_order, plan.groups):
        chans.extend(order.tolist())
        for pattern, start, count in groups:
            gpat.append(pattern)
            gstart.append(base + start)
            gend.append(base + start + count)
        base += len(order)
        gptr.append(len(gpat))
    i32 = lambda a: np.asarray(a, dtype=np.int64)
    return _Schedule(i32(plan.filter_permutation), i32(gptr), i32(gpat), i32(gstart), i32(gend),
                     i32(chans), np.ascontiguousarray(values, dtype=np.float32))


def _out_hw(x, kernel, stride, padding):
    oh = (x.shape[2] + 2 * padding - kernel) // stride + 1
    ow = (x.shape[3] + 2 * padding - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"input {x.shape[2:]} too small for {kernel}x{kernel} kernel")
    return oh, ow


class SparseConv:
    """A pruned 3x3 layer prepared for execution.

    ``fixed_order=True`` walks each filter's kernels in ascending channel order
    instead of pattern-grouped order, so per-output accumulation order does not
    depend on the plan.
    """

    def __init__(self, cw: CompressedWeights, bias, stride=1, padding=0,
                 activation=Activation.IDENTITY, fixed_order=False):
        self.cw = cw
        self.bias = np.asarray(bias, dtype=np.float32)
        if self.bias.shape != (cw.out_channels,):
            raise ShapeError(f"bias length {self.bias.shape} != {cw.out_channels} filters")
        self.stride, self.padding = int(stride), int(padding)
        self.activation = Activation(activation)
        plan = cw.plan
        values = cw.values
        if fixed_order:
            plan = plan_with_permutation(cw.keep, cw.pattern_indices, plan.filter_permutation,
                                         reorder=False)
            values = cw.with_plan(plan).values
        self.plan = plan
        self.schedule = _schedule(plan, values)
        self.module = codegen.pattern_module(cw.library, self.stride)
        self.multiplies = 0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 4 or x.shape[1] != self.cw.in_channels:
            raise ShapeError(f"input {x.shape} does not match {self.cw.in_channels} channels")
        oh, ow = _out_hw(x, 3, self.stride, self.padding)
        xp = np.ascontiguousarray(pad_input(x, self.padding))
        out = np.empty((x.shape[0], self.cw.out_channels, oh, ow), dtype=np.float32)
        out[:] = self.bias[None, :, None, None]
        s = self.schedule
        self.multiplies = int(self.module.run_groups(
            xp, out, s.perm, s.gptr, s.gpat, s.gstart, s.gend, s.chans, s.vals, oh, ow))
        return activate(out, self.activation)


def sparse_conv_exec(x, cw: CompressedWeights, bias, stride=1, padding=0,
                     activation=Activation.IDENTITY, fixed_order=False, return_count=False):
    layer = SparseConv(cw, bias, stride, padding, activation, fixed_order)
    out = layer(x)
    return (out, layer.multiplies) if return_count else out


class DenseDirectConv:
    """Naive dense 3x3 convolution: every tap of every kernel, same loop nest."""

    def __init__(self, weights, bias, stride=1, padding=0, activation=Activation.IDENTITY):
        w = np.asarray(weights, dtype=np.float32)
        if w.ndim != 4 or w.shape[2:] != (3, 3):
            raise ShapeError(f"dense direct path needs 3x3 kernels, got {w.shape}")
        self.out_channels, self.in_channels = w.shape[:2]
        self.bias = np.asarray(bias, dtype=np.float32)
        self.stride, self.padding = int(stride), int(padding)
        self.activation = Activation(activation)
        n_filters = self.out_channels
        per = self.in_channels
        self.schedule = _Schedule(
            perm=np.arange(n_filters, dtype=np.int64),
            gptr=np.arange(n_filters + 1, dtype=np.int64),
            gpat=np.zeros(n_filters, dtype=np.int64),
            gstart=np.arange(n_filters, dtype=np.int64) * per,
            gend=np.arange(1, n_filters + 1, dtype=np.int64) * per,
            chans=np.tile(np.arange(per, dtype=np.int64), n_filters),
            vals=np.ascontiguousarray(w.reshape(-1, 9)),
        )
        self.module = codegen.dense_module(self.stride)
        self.multiplies = 0

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"input {x.shape} does not match {self.in_channels} channels")
        oh, ow = _out_hw(x, 3, self.stride, self.padding)
        xp = np.ascontiguousarray(pad_input(x, self.padding))
        out = np.empty((x.shape[0], self.out_channels, oh, ow), dtype=np.float32)
        out[:] = self.bias[None, :, None, None]
        s = self.schedule
        self.multiplies = int(self.module.run_groups(
            xp, out, s.perm, s.gptr, s.gpat, s.gstart, s.gend, s.chans, s.vals, oh, ow))
        return activate(out, self.activation)


@njit(cache=True, nogil=True)
def _csr_gather(xp, out, row_ptr, col_idx, values, kh, kw, stride, oh, ow):
    mults = 0
    kk = kh * kw
    for n in range(xp.shape[0]):
        for f in range(row_ptr.shape[0] - 1):
            plane = out[n, f]
            for e in range(row_ptr[f], row_ptr[f + 1]):
                col = col_idx[e]
                c = col // kk
                dy = (col % kk) // kw
                dx = col % kw
                v = values[e]
                for y in range(oh):
                    r = xp[n, c, y * stride + dy]
                    for j in range(ow):
                        plane[y, j] += v * r[j * stride + dx]
                mults += oh * ow
    return mults


class CsrGatherConv:
    """Per-nonzero gather over CSR weights; no pattern structure, no input reuse."""

    def __init__(self, csr: CsrWeights, bias, stride=1, padding=0,
                 activation=Activation.IDENTITY):
        self.csr = csr
        self.bias = np.asarray(bias, dtype=np.float32)
        self.stride, self.padding = int(stride), int(padding)
        self.activation = Activation(activation)
        self.multiplies = 0

    def __call__(self, x):
        out_c, in_c, kh, kw = self.csr.shape
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 4 or x.shape[1] != in_c:
            raise ShapeError(f"input {x.shape} does not match {in_c} channels")
        oh, ow = _out_hw(x, kh, self.stride, self.padding)
        xp = np.ascontiguousarray(pad_input(x, self.padding))
        out = np.empty((x.shape[0], out_c, oh, ow), dtype=np.float32)
        out[:] = self.bias[None, :, None, None]
        self.multiplies = int(_csr_gather(xp, out, self.csr.row_ptr.astype(np.int64),
                                          self.csr.col_idx.astype(np.int64), self.csr.values,
                                          kh, kw, self.stride, oh, ow))
        return activate(out, self.activation)

"""Wall-clock comparison of dense, CSR and FKW execution paths."""
from __future__ import annotations

import csv
import io
import os
import platform
import statistics
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from ..tensor import ConvLayer
from .csr import encode_csr
from .executor import CsrGatherConv, DenseDirectConv, SparseConv
from .fkw import encode_fkw
from .plan import build_reorder_plan

VARIANTS = ("dense", "csr-gather", "fkw-unordered", "fkw-reordered")


@dataclass
class BenchRow:
    variant: str
    layer: str
    median_ms: float
    multiplies: int
    bytes: int


@dataclass
class BenchReport:
    rows: list[BenchRow]
    environment: dict = field(default_factory=dict)

    def row(self, variant: str, layer: str) -> BenchRow:
        return next(r for r in self.rows if r.variant == variant and r.layer == layer)

    def speedup(self, layer: str, variant="fkw-reordered", baseline="dense") -> float:
        return self.row(baseline, layer).median_ms / self.row(variant, layer).median_ms

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "layer", "median_ms", "multiplies", "bytes"])
        for r in self.rows:
            w.writerow([r.variant, r.layer, f"{r.median_ms:.4f}", r.multiplies, r.bytes])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'layer':<12}{'variant':<16}{'median ms':>12}{'multiplies':>14}{'bytes':>12}"]
        for r in self.rows:
            lines.append(f"{r.layer:<12}{r.variant:<16}{r.median_ms:>12.3f}"
                         f"{r.multiplies:>14}{r.bytes:>12}")
        return "\n".join(lines)


def environment() -> dict:
    info = {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor(),
        "cpu_count": os.cpu_count(),
    }
    try:
        import numba
        info["numba"] = numba.__version__
    except ImportError:  # pragma: no cover
        pass
    return info


def _median_ms(fn, x, repetitions: int) -> float:
    fn(x)  # warm-up: triggers compilation / cache load
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn(x)
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def benchmark(layers, x_by_layer, repetitions: int = 5, variants=VARIANTS) -> BenchReport:
    """Time every variant on every layer.

    ``layers`` is a list of (name, ConvLayer, keep, pattern_indices, library)
    tuples for pruned 3x3 layers; ``x_by_layer`` maps names to inputs.
    """
    if repetitions < 3:
        raise ValueError("need at least 3 repetitions for a median")
    rows = []
    for name, layer, keep, indices, library in layers:
        x = x_by_layer[name]
        w = layer.weights
        args = (layer.bias, layer.stride, layer.padding, layer.activation)
        runners = {}
        if "dense" in variants:
            runners["dense"] = (DenseDirectConv(w, *args), w.nbytes)
        if "csr-gather" in variants:
            csr = encode_csr(w)
            runners["csr-gather"] = (CsrGatherConv(csr, *args), csr.nbytes)
        if "fkw-unordered" in variants:
            plain = build_reorder_plan(keep, indices, reorder=False)
            cw = encode_fkw(w, keep, indices, library, plain)
            runners["fkw-unordered"] = (SparseConv(cw, *args), cw.nbytes)
        if "fkw-reordered" in variants:
            cw = encode_fkw(w, keep, indices, library)
            runners["fkw-reordered"] = (SparseConv(cw, *args), cw.nbytes)
        for variant in variants:
            fn, nbytes = runners[variant]
            ms = _median_ms(fn, x, repetitions)
            rows.append(BenchRow(variant, name, ms, fn.multiplies, nbytes))
    return BenchReport(rows, environment())


def synthetic_pruned_layer(in_channels, out_channels, library, kept_fraction, rng,
                           stride=1, padding=1) -> tuple[ConvLayer, np.ndarray, np.ndarray]:
    """Random layer pattern-projected onto ``library`` keeping a fraction of kernels."""
    from ..patterns import project_kernels

    w = rng.standard_normal((out_channels, in_channels, 3, 3)).astype(np.float32)
    idx, w = project_kernels(w, library)
    idx = idx.reshape(out_channels, in_channels)
    n = out_channels * in_channels
    kept = max(1, int(round(kept_fraction * n)))
    keep = np.zeros(n, dtype=bool)
    keep[rng.choice(n, kept, replace=False)] = True
    keep = keep.reshape(out_channels, in_channels)
    w = np.where(keep[:, :, None, None], w, 0).astype(np.float32)
    idx = np.where(keep, idx, 0)
    bias = rng.standard_normal(out_channels).astype(np.float32) * 0.1
    return ConvLayer(w, bias, stride, padding), keep, idx

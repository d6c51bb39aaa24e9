"""Filter/kernel reordering so equal-length, equal-pattern work sits together."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PlanError(ValueError):
    pass


@dataclass
class ReorderPlan:
    """Execution order of a pruned layer.

    ``filter_permutation[j]`` is the original output channel executed j-th.
    ``kernel_order[j]`` lists the kept input channels of that filter sorted by
    (pattern index, channel); ``groups[j]`` are the (pattern, start, count)
    runs tiling ``kernel_order[j]``.
    """

    filter_permutation: np.ndarray
    kernel_order: list[np.ndarray]
    groups: list[list[tuple[int, int, int]]]

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.filter_permutation)
        inv[self.filter_permutation] = np.arange(len(self.filter_permutation))
        return inv


def _check(keep: np.ndarray, indices: np.ndarray) -> None:
    if keep.ndim != 2 or indices.shape != keep.shape:
        raise PlanError(f"keep bitmap {keep.shape} and pattern indices {indices.shape} disagree")
    if np.any(indices[keep] < 0):
        raise PlanError("kept kernel without a pattern index")


def kernel_order(keep_row: np.ndarray, index_row: np.ndarray) -> np.ndarray:
    chans = np.flatnonzero(keep_row)
    # lexsort: last key is primary
    return chans[np.lexsort((chans, index_row[chans]))]


def runs(patterns: np.ndarray) -> list[tuple[int, int, int]]:
    out = []
    start = 0
    for i in range(1, len(patterns) + 1):
        if i == len(patterns) or patterns[i] != patterns[start]:
            out.append((int(patterns[start]), start, i - start))
            start = i
    return out


def build_reorder_plan(keep, indices, reorder: bool = True) -> ReorderPlan:
    """Deterministic plan; ``reorder=False`` keeps original filter and channel order."""
    keep = np.asarray(keep, dtype=bool)
    indices = np.asarray(indices)
    _check(keep, indices)
    n_filters = keep.shape[0]
    if reorder:
        def key(f):
            kept = indices[f][keep[f]]
            return (len(kept), tuple(sorted(kept.tolist())), f)
        perm = np.array(sorted(range(n_filters), key=key), dtype=np.int64)
    else:
        perm = np.arange(n_filters, dtype=np.int64)
    return plan_with_permutation(keep, indices, perm, reorder)


def plan_with_permutation(keep, indices, perm, reorder: bool = True) -> ReorderPlan:
    """Plan that honours an explicit filter permutation (as stored in a file)."""
    keep = np.asarray(keep, dtype=bool)
    indices = np.asarray(indices)
    _check(keep, indices)
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(keep.shape[0])):
        raise PlanError("filter permutation is not a bijection")
    orders, groups = [], []
    for f in perm:
        order = kernel_order(keep[f], indices[f]) if reorder else np.flatnonzero(keep[f])
        orders.append(order)
        groups.append(runs(indices[f][order]))
    return ReorderPlan(perm, orders, groups)

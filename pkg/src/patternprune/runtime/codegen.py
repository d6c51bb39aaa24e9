"""Source generation for pattern-specialized convolution routines.

Each routine handles a run of kernels sharing one tap set.  Its inner loop
computes a tile of four adjacent output columns: every input value the tile
needs from a kernel row is loaded once into a local and reused by all taps
and all four outputs that touch it.  Tap offsets and the stride are baked in
as literals so the compiled loop has no data-dependent control flow.

Generated modules are written to a cache directory and imported from there so
numba can cache the machine code between processes.
"""
from __future__ import annotations

import hashlib
import importlib.util
import os
import sys
import tempfile
from pathlib import Path

TILE = 4


def cache_dir() -> Path:
    root = os.environ.get("PATTERNPRUNE_KERNEL_CACHE")
    if root:
        path = Path(root)
    else:
        path = Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "patternprune"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _taps(cells):
    return [divmod(c, 3) for c in cells]


def routine_source(name: str, cells, stride: int) -> str:
    """One specialized routine; ``cells`` is the tap order used for the weights."""
    taps = _taps(cells)
    n = len(taps)
    rows = sorted({dy for dy, _ in taps})
    lines = [
        f"@njit(cache=True, nogil=True)",
        f"def {name}(x, plane, chans, vals, k0, k1, oh, ow):",
        f"    mults = 0",
        f"    for k in range(k0, k1):",
        f"        c = chans[k]",
    ]
    for t in range(n):
        lines.append(f"        w{t} = vals[k, {t}]")
    lines.append(f"        for y in range(oh):")
    for dy in rows:
        lines.append(f"            r{dy} = x[c, y * {stride} + {dy}]")
    lines.append(f"            o = plane[y]")
    lines.append(f"            j = 0")
    lines.append(f"            while j + {TILE} <= ow:")
    lines.append(f"                b = j * {stride}")
    # each distinct (row, column offset) is loaded exactly once per tile
    loads = {}
    for dy in rows:
        offsets = sorted({q * stride + dx for q in range(TILE) for ddy, dx in taps if ddy == dy})
        for off in offsets:
            var = f"v{dy}_{off}"
            loads[(dy, off)] = var
            lines.append(f"                {var} = r{dy}[b + {off}]")
    for q in range(TILE):
        terms = [f"w{t} * {loads[(dy, q * stride + dx)]}" for t, (dy, dx) in enumerate(taps)]
        lines.append(f"                o[j + {q}] += " + " + ".join(terms))
    lines.append(f"                j += {TILE}")
    lines.append(f"            while j < ow:")
    lines.append(f"                b = j * {stride}")
    terms = [f"w{t} * r{dy}[b + {dx}]" for t, (dy, dx) in enumerate(taps)]
    lines.append(f"                o[j] += " + " + ".join(terms))
    lines.append(f"                j += 1")
    lines.append(f"        mults += {n} * oh * ow")
    lines.append(f"    return mults")
    return "\n".join(lines) + "\n"


def module_source(tap_sets, stride: int) -> str:
    """Routines for each tap set plus a grouped driver dispatching on set index."""
    parts = ["from numba import njit\n\n"]
    for p, cells in enumerate(tap_sets):
        parts.append(routine_source(f"pattern_{p}", cells, stride) + "\n\n")
    body = [
        "@njit(cache=True, nogil=True)",
        "def run_groups(xp, out, perm, gptr, gpat, gstart, gend, chans, vals, oh, ow):",
        "    mults = 0",
        "    for n in range(xp.shape[0]):",
        "        x = xp[n]",
        "        for j in range(perm.shape[0]):",
        "            plane = out[n, perm[j]]",
        "            for g in range(gptr[j], gptr[j + 1]):",
        "                p = gpat[g]",
    ]
    for p in range(len(tap_sets)):
        kw = "if" if p == 0 else "elif"
        body.append(f"                {kw} p == {p}:")
        body.append(f"                    mults += pattern_{p}(x, plane, chans, vals, "
                    f"gstart[g], gend[g], oh, ow)")
    body.append("    return mults")
    parts.append("\n".join(body) + "\n")
    return "".join(parts)


_loaded: dict[str, object] = {}


def load_module(source: str):
    key = hashlib.sha1(source.encode()).hexdigest()[:16]
    if key in _loaded:
        return _loaded[key]
    name = f"ppkernels_{key}"
    path = cache_dir() / f"{name}.py"
    if not path.exists() or path.read_text() != source:
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            fh.write(source)
        os.replace(tmp, path)
    spec = importlib.util.spec_from_file_location(name, path)
    module = importlib.util.module_from_spec(spec)
    sys.modules[name] = module
    spec.loader.exec_module(module)
    _loaded[key] = module
    return module


def pattern_module(library, stride: int):
    return load_module(module_source([p.storage_order for p in library.patterns], stride))


def dense_module(stride: int):
    return load_module(module_source([tuple(range(9))], stride))

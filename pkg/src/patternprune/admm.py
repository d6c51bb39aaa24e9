"""Data-free layer-wise ADMM pruning onto a pattern library.

Every pattern-eligible layer n solves

    min ||sigma(W_n X_{n-1} + b_n) - X'_n||_F^2   s.t. each kernel of W_n fits
                                                  one library pattern
                                                  (and at most beta_count
                                                  kernels are nonzero)

where X_{n-1} comes from forwarding random images and X'_n is the pretrained
layer applied to that same X_{n-1}.  The constraint is handled with an
auxiliary copy A_n and a scaled dual D_n.  No user data is read anywhere in
this module.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .modelio import LayerMask
from .patterns import PatternLibrary, extract_pattern_library, project_kernels
from .tensor import (
    Activation,
    ConvLayer,
    ConvModel,
    ShapeError,
    conv2d_forward,
    frobenius_distance_sq,
    im2col,
)

INPUT_MODES = ("current", "pretrained")


class PruneError(ValueError):
    pass


@dataclass
class PruneConfig:
    K: int = 110
    T: int = 32
    rho0: float = 1e-4
    rho_growth: float = 10.0
    rho_period_epochs: int = 11
    rho_max: float = 1e-1
    lr: float = 1e-3
    inner_steps: int = 10
    iters_per_epoch: int = 10
    m: int = 8
    beta: Optional[float] = None
    seed: int = 0
    # primal solver details left open by the method description
    momentum: float = 0.99
    data_scale: float = 0.03
    rescale_dual: bool = True
    input_mode: str = "current"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.K < 1:
            raise PruneError(f"K must be >= 1, got {self.K}")
        if self.T < 1:
            raise PruneError(f"T must be >= 1, got {self.T}")
        if not 0 < self.rho0 <= self.rho_max:
            raise PruneError(f"need 0 < rho0 <= rho_max, got {self.rho0}, {self.rho_max}")
        if self.rho_growth < 1:
            raise PruneError("rho_growth must be >= 1")
        if self.rho_period_epochs < 1 or self.iters_per_epoch < 1:
            raise PruneError("rho_period_epochs and iters_per_epoch must be >= 1")
        if self.lr <= 0:
            raise PruneError("lr must be positive")
        if self.inner_steps < 0:
            raise PruneError("inner_steps must be >= 0")
        if not 1 <= self.m <= 16:
            raise PruneError(f"m must be in 1..16, got {self.m}")
        if self.beta is not None and not 0 < self.beta <= 1:
            raise PruneError(f"beta must be in (0, 1], got {self.beta}")
        if not 0 <= self.momentum < 1:
            raise PruneError("momentum must be in [0, 1)")
        if self.data_scale <= 0:
            raise PruneError("data_scale must be positive")
        if self.input_mode not in INPUT_MODES:
            raise PruneError(f"input_mode must be one of {INPUT_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "PruneConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise PruneError(f"unknown prune config keys: {', '.join(unknown)}")
        return cls(**values)


@dataclass
class AdmmLayerState:
    W: np.ndarray
    b: np.ndarray
    A: np.ndarray
    D: np.ndarray
    rho: float
    # momentum buffers of the primal solver
    vW: Optional[np.ndarray] = None
    vb: Optional[np.ndarray] = None
    pattern_indices: Optional[np.ndarray] = None
    keep: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (self.W.shape == self.A.shape == self.D.shape):
            raise ShapeError(f"W {self.W.shape}, A {self.A.shape}, D {self.D.shape} differ")
        if not self.rho > 0:
            raise PruneError(f"rho must be positive, got {self.rho}")
        if self.vW is None:
            self.vW = np.zeros_like(self.W)
        if self.vb is None:
            self.vb = np.zeros_like(self.b)

    @classmethod
    def initial(cls, layer: ConvLayer, rho: float) -> "AdmmLayerState":
        w = layer.weights.astype(np.float32, copy=True)
        return cls(w, layer.bias.astype(np.float32, copy=True), w.copy(), np.zeros_like(w), rho)

    def copy(self) -> "AdmmLayerState":
        def c(a):
            return None if a is None else a.copy()
        return AdmmLayerState(self.W.copy(), self.b.copy(), self.A.copy(), self.D.copy(),
                              self.rho, c(self.vW), c(self.vb), c(self.pattern_indices),
                              c(self.keep))


@dataclass
class TraceRow:
    iteration: int
    layer: int
    primal_residual: float
    objective: float


@dataclass
class PruneResult:
    model: ConvModel
    library: PatternLibrary
    masks: list[LayerMask]
    trace: list[TraceRow] = field(default_factory=list)
    config: Optional[PruneConfig] = None
    # W of every pruned layer after the last iteration, before the hard projection
    admm_weights: dict[int, np.ndarray] = field(default_factory=dict)

    def relative_residuals(self) -> dict[int, float]:
        """Last logged ||W - A|| of each layer divided by ||W||."""
        last = {row.layer: row.primal_residual for row in self.trace}
        out = {}
        for n, w in self.admm_weights.items():
            norm = float(np.linalg.norm(w.astype(np.float64)))
            out[n] = last.get(n, 0.0) / norm if norm else 0.0
        return out

    def mask_for(self, layer: int) -> LayerMask:
        for mask in self.masks:
            if mask.layer == layer:
                return mask
        raise KeyError(f"layer {layer} was not pruned")

    def weight_masks(self) -> dict[int, np.ndarray]:
        """Binary retrain mask of every pruned layer (1 = trainable weight)."""
        return {m.layer: m.weight_mask(self.library, self.model.layers[m.layer].kernel_size)
                for m in self.masks}

    def trace_csv(self) -> str:
        lines = ["iteration,layer,primal_residual,objective"]
        for r in self.trace:
            lines.append(f"{r.iteration},{r.layer},{r.primal_residual:.9e},{r.objective:.9e}")
        return "\n".join(lines) + "\n"


def generate_synthetic_batch(input_shape, T: int, rng: np.random.Generator) -> np.ndarray:
    """T random images with integer pixels uniform over 0..255, scaled into [0, 1]."""
    if T < 1:
        raise PruneError(f"batch size must be >= 1, got {T}")
    raw = rng.integers(0, 256, size=(T,) + tuple(input_shape), dtype=np.int64)
    return raw.astype(np.float32) / np.float32(255.0)


def rho_schedule(epoch: int, cfg: PruneConfig) -> float:
    if epoch < 0:
        raise PruneError(f"epoch must be >= 0, got {epoch}")
    steps = epoch // cfg.rho_period_epochs
    # the cap is reached after a handful of steps; avoid overflowing the power
    if cfg.rho_growth > 1:
        steps = min(steps, math.ceil(math.log(cfg.rho_max / cfg.rho0, cfg.rho_growth)) + 1)
    return min(cfg.rho0 * cfg.rho_growth ** steps, cfg.rho_max)


def _normalize(model: ConvModel, x: np.ndarray) -> np.ndarray:
    # only explicit normalization carried by the model file; no dataset statistics
    if model.norm_mean is None:
        return x
    mean = np.asarray(model.norm_mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(model.norm_std, dtype=np.float32).reshape(1, -1, 1, 1)
    return (x - mean) / std


def eligible_layers(model: ConvModel, cfg: PruneConfig) -> list[int]:
    """3x3 convs always; 1x1 convs only when connectivity pruning is on."""
    return [i for i, layer in enumerate(model.layers)
            if layer.is_3x3 or (cfg.beta is not None and layer.kernel_size == (1, 1))]


def beta_count(layer: ConvLayer, beta: float) -> int:
    total = layer.out_channels * layer.in_channels
    return min(total, max(1, int(round(beta * total))))


def _data_loss_scale(target: np.ndarray, cfg: PruneConfig) -> float:
    # squared error averaged over output elements, times data_scale
    return cfg.data_scale / target.size


def primal_update(state: AdmmLayerState, layer: ConvLayer, X_in: np.ndarray,
                  X_target: np.ndarray, cfg: PruneConfig) -> AdmmLayerState:
    """``cfg.inner_steps`` momentum-SGD steps on the primal subproblem.

    The data term is the squared output error averaged over elements and
    multiplied by ``cfg.data_scale``; the penalty term is (rho/2)||W - A + D||^2.
    ``layer`` supplies stride, padding and activation.
    """
    kh, kw = state.W.shape[2:]
    oh, ow = layer.output_hw(X_in.shape[2], X_in.shape[3])
    expected = (X_in.shape[0], state.W.shape[0], oh, ow)
    if X_target.shape != expected:
        raise ShapeError(f"target shape {X_target.shape} != conv output shape {expected}")
    if X_in.shape[1] != state.W.shape[1]:
        raise ShapeError(f"input has {X_in.shape[1]} channels, weights expect {state.W.shape[1]}")
    new = state.copy()
    if cfg.inner_steps == 0:
        return new
    out_c = state.W.shape[0]
    dtype = np.float32
    cols = im2col(X_in.astype(dtype, copy=False), kh, kw, layer.stride, layer.padding)
    target = X_target.transpose(0, 2, 3, 1).reshape(-1, out_c).astype(dtype)
    two_s = dtype(2.0 * _data_loss_scale(X_target, cfg))
    rho, lr, mom = dtype(state.rho), dtype(cfg.lr), dtype(cfg.momentum)
    W = new.W.reshape(out_c, -1)
    anchor = (new.A - new.D).reshape(out_c, -1)
    vW = new.vW.reshape(out_c, -1)
    b, vb = new.b, new.vb
    relu = layer.activation == Activation.RELU
    # divergence is reported by the caller's finiteness check, not as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        _sgd(cols, target, W, b, vW, vb, anchor, two_s, rho, lr, mom, relu, cfg.inner_steps)
    return new


def _sgd(cols, target, W, b, vW, vb, anchor, two_s, rho, lr, mom, relu, steps):
    for _ in range(steps):
        pre = cols @ W.T + b
        if relu:
            g = two_s * (np.maximum(pre, 0) - target) * (pre > 0)
        else:
            g = two_s * (pre - target)
        gW = g.T @ cols + rho * (W - anchor)
        gb = g.sum(axis=0)
        vW *= mom
        vW += gW
        vb *= mom
        vb += gb
        W -= lr * vW
        b -= lr * vb


def primal_objective(state: AdmmLayerState, layer: ConvLayer, X_in, X_target,
                     cfg: PruneConfig) -> float:
    """Value of the primal subproblem in float64 (the quantity SGD descends)."""
    out = conv2d_forward(X_in, layer.replace(weights=state.W, bias=state.b))
    data = _data_loss_scale(X_target, cfg) * frobenius_distance_sq(out, X_target)
    return data + state.rho / 2 * frobenius_distance_sq(state.W, state.A - state.D)


def proximal_update_pattern(state: AdmmLayerState, library: PatternLibrary) -> AdmmLayerState:
    if state.W.shape[2:] != (3, 3):
        raise PruneError(f"pattern projection needs 3x3 kernels, got {state.W.shape}")
    new = state.copy()
    idx, new.A = project_kernels(state.W + state.D, library)
    new.pattern_indices = idx.reshape(state.W.shape[:2])
    return new


def top_kernels(kernels: np.ndarray, count: int) -> np.ndarray:
    """Boolean (out, in) map of the ``count`` kernels with largest squared norm.

    Ties keep the lower flattened (filter, channel) index.
    """
    flat = kernels.reshape(kernels.shape[0] * kernels.shape[1], -1).astype(np.float64)
    norms = np.einsum("ij,ij->i", flat, flat)
    order = np.argsort(-norms, kind="stable")
    keep = np.zeros(len(norms), dtype=bool)
    keep[order[:count]] = True
    return keep.reshape(kernels.shape[:2])


def proximal_update_connectivity(state: AdmmLayerState, beta_count: int) -> AdmmLayerState:
    """Keep the ``beta_count`` largest kernels of W + D (or of the pattern-projected A).

    When a pattern step already ran in this proximal update, ``state.A`` holds
    the pattern-projected W + D and is what gets thinned.
    """
    total = state.W.shape[0] * state.W.shape[1]
    if not 1 <= beta_count <= total:
        raise PruneError(f"beta_count {beta_count} outside 1..{total}")
    new = state.copy()
    source = state.A if state.pattern_indices is not None else state.W + state.D
    keep = top_kernels(source, beta_count)
    new.A = np.where(keep[:, :, None, None], source, source.dtype.type(0))
    new.keep = keep
    return new


def dual_update(state: AdmmLayerState) -> AdmmLayerState:
    if not (state.W.shape == state.A.shape == state.D.shape):
        raise ShapeError("W, A, D shapes differ")
    new = state.copy()
    new.D = state.D + (state.W - state.A)
    return new


def layer_objective(layer: ConvLayer, pretrained: ConvLayer, X_in: np.ndarray) -> float:
    """||sigma(W X + b) - X'||_F^2 with X' from the pretrained layer on the same X."""
    return frobenius_distance_sq(conv2d_forward(X_in, layer), conv2d_forward(X_in, pretrained))


def model_objective(model: ConvModel, pretrained: ConvModel, x: np.ndarray,
                    layers: Optional[list[int]] = None) -> dict[int, float]:
    """Per-layer objective with each layer fed by ``model``'s own activations."""
    out = {}
    for i, layer in enumerate(model.layers):
        if layers is None or i in layers:
            out[i] = layer_objective(layer, pretrained.layers[i], x)
        x = conv2d_forward(x, layer)
    return out


def prune_layer(n: int, current: ConvModel, pretrained: ConvModel, state: AdmmLayerState,
                library: PatternLibrary, cfg: PruneConfig, X_in: np.ndarray):
    """One ADMM iteration of layer ``n`` on the input volume ``X_in``.

    Returns the new state and the data objective after the primal step.
    """
    layer = current.layers[n]
    target = conv2d_forward(X_in, pretrained.layers[n])
    state = primal_update(state, layer, X_in, target, cfg)
    fitted = layer.replace(weights=state.W, bias=state.b)
    objective = frobenius_distance_sq(conv2d_forward(X_in, fitted), target)
    state.pattern_indices = None
    state.keep = None
    if layer.is_3x3:
        state = proximal_update_pattern(state, library)
    if cfg.beta is not None:
        state = proximal_update_connectivity(state, beta_count(layer, cfg.beta))
    state = dual_update(state)
    return state, objective


def hard_project(layer: ConvLayer, library: PatternLibrary, cfg: PruneConfig):
    """Project weights onto the constraint set; returns (weights, LayerMask)."""
    w = layer.weights
    idx = None
    if layer.is_3x3:
        flat_idx, w = project_kernels(w, library)
        idx = flat_idx.reshape(w.shape[:2])
    if cfg.beta is not None:
        keep = top_kernels(w, beta_count(layer, cfg.beta))
    else:
        keep = np.ones(w.shape[:2], dtype=bool)
    w = np.where(keep[:, :, None, None], w, 0).astype(np.float32)
    if idx is not None:
        idx = np.where(keep, idx, 0)
    return w, idx, keep


def prune_model(pretrained: ConvModel, cfg: PruneConfig,
                library: Optional[PatternLibrary] = None) -> PruneResult:
    """Algorithm driver.  Inputs are only the model and the configuration."""
    cfg.validate()
    if pretrained.input_shape is None:
        raise PruneError("model has no input shape; cannot synthesize inputs")
    pretrained.layer_shapes()
    targets = eligible_layers(pretrained, cfg)
    if not targets:
        raise PruneError("no eligible layers to prune")
    if library is None:
        library = extract_pattern_library(pretrained, cfg.m)
    current = pretrained.copy()
    rho = rho_schedule(0, cfg)
    states = {n: AdmmLayerState.initial(pretrained.layers[n], rho) for n in targets}
    trace = []
    for k in range(cfg.K):
        new_rho = rho_schedule(k // cfg.iters_per_epoch, cfg)
        if new_rho != rho:
            for st in states.values():
                if cfg.rescale_dual:
                    # scaled dual is lambda / rho
                    st.D = (st.D * np.float32(rho / new_rho)).astype(np.float32)
                st.rho = new_rho
            rho = new_rho
        batch = generate_synthetic_batch(pretrained.input_shape, cfg.T,
                                         np.random.default_rng([cfg.seed, k]))
        x = x_ref = _normalize(pretrained, batch)
        for n, layer in enumerate(current.layers):
            if n in states:
                X_in = x if cfg.input_mode == "current" else x_ref
                st, objective = prune_layer(n, current, pretrained, states[n], library, cfg, X_in)
                for name in ("W", "b", "A", "D"):
                    if not np.all(np.isfinite(getattr(st, name))):
                        raise PruneError(f"non-finite {name} in layer {n} at iteration {k}")
                states[n] = st
                current.layers[n] = layer.replace(weights=st.W.copy(), bias=st.b.copy())
                residual = math.sqrt(frobenius_distance_sq(st.W, st.A))
                trace.append(TraceRow(k, n, residual, objective))
            x = conv2d_forward(x, current.layers[n])
            if cfg.input_mode == "pretrained":
                x_ref = conv2d_forward(x_ref, pretrained.layers[n])
    masks, admm_weights = [], {}
    for n in targets:
        admm_weights[n] = current.layers[n].weights.copy()
        w, idx, keep = hard_project(current.layers[n], library, cfg)
        current.layers[n] = current.layers[n].replace(weights=w)
        masks.append(LayerMask(n, keep, idx))
    return PruneResult(current, library, masks, trace, cfg, admm_weights)


def compression_rate(result: PruneResult) -> tuple[dict[int, float], float]:
    """Total conv weights over retained conv weights, per layer and overall.

    Layers never pruned count with all weights retained in the overall rate.
    """
    weight_masks = result.weight_masks()
    per_layer, total, kept = {}, 0, 0
    for i, layer in enumerate(result.model.layers):
        n = layer.weights.size
        r = int(weight_masks[i].sum()) if i in weight_masks else n
        if i in weight_masks:
            per_layer[i] = n / r if r else math.inf
        total += n
        kept += r
    return per_layer, (total / kept if kept else math.inf)

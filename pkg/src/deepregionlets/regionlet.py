"""Deep regionlet feature extraction: region selection heads, sampling,
soft gating and per-region pooling, forward and backward.

Batch conventions: ``U`` is a (B, C, Hin, Win) map stack, proposals are
indexed by ``batch_index`` (N,), ``rois`` (N, 4) and ``roi_features``
(N, D). Pooled features come out as (N, K, C).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import net
from .geometry import _roi_array, cell_init_transforms
from .net import Parameter
from .rng import Rng
from .sampler import (
    SampledRegion,
    sample_batch_backward_input,
    sample_batch_backward_theta,
    sample_batch_forward,
)

HIDDEN = 256
MODES = ("projective", "affine", "offset_only", "global")
POOL_MODES = ("max", "avg")

# which of theta_1..theta_8 each mode lets the network move
_FREE_SLOTS = {
    "projective": np.array([1, 1, 1, 1, 1, 1, 1, 1], dtype=bool),
    "affine": np.array([1, 1, 1, 1, 1, 1, 0, 0], dtype=bool),
    "global": np.array([1, 1, 1, 1, 1, 1, 0, 0], dtype=bool),
    "offset_only": np.array([0, 0, 1, 0, 0, 1, 0, 0], dtype=bool),
}


def free_slots(mode: str) -> np.ndarray:
    if mode not in _FREE_SLOTS:
        raise ValueError(f"unknown RSN mode {mode!r}; expected one of {MODES}")
    return _FREE_SLOTS[mode].copy()


class RsnCache(NamedTuple):
    x: np.ndarray
    fc1: np.ndarray
    relu1: np.ndarray
    fc2: np.ndarray
    relu2: np.ndarray
    h2: np.ndarray
    raw: np.ndarray


@dataclass
class RsnHead:
    """Three fully connected layers D -> 256 -> 256 -> 9 predicting one
    region's transform. ``init_theta`` holds the cell transform the head
    starts from; offset-only mode pins the scale/shear slots to it."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter
    w3: Parameter
    b3: Parameter
    mode: str
    init_theta: np.ndarray
    cache: RsnCache | None = field(default=None, repr=False, compare=False)

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    def parameters(self) -> dict[str, Parameter]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def weight_count(self) -> int:
        return self.w1.value.size + self.w2.value.size + self.w3.value.size


def _as_rng(rng_seed) -> Rng:
    return rng_seed if isinstance(rng_seed, Rng) else Rng(rng_seed)


def rsn_init(K: int, D: int, grid_rows: int, grid_cols: int, rng_seed,
             mode: str = "projective", hidden: int = HIDDEN) -> list[RsnHead]:
    """One head per cell of a grid_rows x grid_cols tiling of the proposal.

    fc1/fc2 are uniform in +-1/sqrt(fan_in); fc3 weights are zero and its
    bias is the cell transform, so every head starts at its cell for any input.
    """
    free_slots(mode)
    if mode == "global" and (K != 1 or grid_rows != 1 or grid_cols != 1):
        raise ValueError("global mode uses exactly one 1x1 region")
    if K != grid_rows * grid_cols:
        raise ValueError(f"K={K} does not match a {grid_rows}x{grid_cols} grid")
    if D < 1:
        raise ValueError("input dimension must be positive")
    rng = _as_rng(rng_seed)
    heads = []
    for cell in cell_init_transforms(grid_rows, grid_cols):
        theta0 = cell.theta.copy()
        heads.append(RsnHead(
            w1=Parameter(net.uniform_init(rng, D, (D, hidden))),
            b1=Parameter(net.uniform_init(rng, D, (hidden,))),
            w2=Parameter(net.uniform_init(rng, hidden, (hidden, hidden))),
            b2=Parameter(net.uniform_init(rng, hidden, (hidden,))),
            w3=Parameter(np.zeros((hidden, 9))),
            b3=Parameter(theta0.copy()),
            mode=mode,
            init_theta=theta0,
        ))
    return heads


def rsn_parameter_count(K: int, D: int, hidden: int = HIDDEN, include_bias: bool = False) -> int:
    """Weight count of K heads (biases excluded unless asked for)."""
    n = D * hidden + hidden * hidden + hidden * 9
    if include_bias:
        n += hidden + hidden + 9
    return K * n


def rsn_forward(head: RsnHead, roi_feature) -> np.ndarray:
    """Predict theta (9,) for one feature vector, or (N, 9) for a batch.

    Outputs are clamped to [-1, 1], theta_9 is pinned to 1 and slots the
    mode does not learn are overwritten with their fixed values.
    """
    x = np.asarray(roi_feature, dtype=np.float64)
    if x.shape[-1] != head.input_dim:
        raise ValueError(f"roi feature has dim {x.shape[-1]}, head expects {head.input_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("roi feature contains non-finite values")
    a1, c1 = net.fc_forward(x, head.w1.value, head.b1.value)
    h1, r1 = net.relu_forward(a1)
    a2, c2 = net.fc_forward(h1, head.w2.value, head.b2.value)
    h2, r2 = net.relu_forward(a2)
    raw, _ = net.fc_forward(h2, head.w3.value, head.b3.value)
    if not np.all(np.isfinite(raw)):
        raise ValueError("RSN produced non-finite activations")
    theta = np.clip(raw, -1.0, 1.0)
    theta[..., 8] = 1.0
    fixed = ~free_slots(head.mode)
    theta[..., :8] = np.where(fixed, _fixed_values(head), theta[..., :8])
    head.cache = RsnCache(x, c1, r1, c2, r2, h2, raw)
    return theta


def _fixed_values(head: RsnHead) -> np.ndarray:
    vals = head.init_theta[:8].copy()
    vals[6:8] = 0.0
    return vals


def rsn_backward(head: RsnHead, roi_feature, grad_theta, cache: RsnCache | None = None):
    """Backprop (…, 8) theta gradients through the head.

    Returns ``(grads, grad_roi_feature)`` where grads maps parameter names to
    arrays. Fixed slots, theta_9 and clamp-saturated outputs pass no gradient.
    """
    cache = cache if cache is not None else head.cache
    if cache is None:
        raise RuntimeError("rsn_backward called without a cached forward pass")
    x = np.asarray(roi_feature, dtype=np.float64)
    if x.shape != cache.x.shape:
        raise ValueError("roi feature does not match the cached forward pass")
    grad_theta = np.asarray(grad_theta, dtype=np.float64)
    if grad_theta.shape != cache.raw.shape[:-1] + (8,):
        raise ValueError(f"grad_theta shape {grad_theta.shape} does not match forward")
    g_raw = np.zeros(cache.raw.shape)
    g_raw[..., :8] = grad_theta * free_slots(head.mode)
    g_raw *= np.abs(cache.raw) <= 1.0
    g_raw[..., 8] = 0.0
    g_h2, gw3, gb3 = net.fc_backward(cache.h2, head.w3.value, g_raw)
    g_a2 = net.relu_backward(cache.relu2, g_h2)
    g_h1, gw2, gb2 = net.fc_backward(cache.fc2, head.w2.value, g_a2)
    g_a1 = net.relu_backward(cache.relu1, g_h1)
    g_x, gw1, gb1 = net.fc_backward(cache.fc1, head.w1.value, g_a1)
    grads = {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2, "w3": gw3, "b3": gb3}
    return grads, g_x


# ---------------------------------------------------------------- gating


@dataclass
class GatingLayer:
    """Fully connected sigmoid gate with one weight per element of V.

    Shared across regions by default (w: (P, P), b: (P,)); with
    ``per_region`` the arrays gain a leading K axis.
    """

    w: Parameter
    b: Parameter
    shape: tuple[int, int, int]
    per_region: bool = False

    @property
    def size(self) -> int:
        C, H, W = self.shape
        return C * H * W

    def parameters(self) -> dict[str, Parameter]:
        return {"w": self.w, "b": self.b}

    def slice(self, region: int | None):
        if not self.per_region:
            return self.w.value, self.b.value
        if region is None:
            raise ValueError("per-region gating needs a region index")
        return self.w.value[region], self.b.value[region]


def gating_init(C: int, H: int, W: int, rng_seed=None, K: int = 1,
                per_region: bool = False, zero: bool = False) -> GatingLayer:
    P = C * H * W
    lead = (K,) if per_region else ()
    if zero or rng_seed is None:
        w = np.zeros(lead + (P, P))
    else:
        w = net.uniform_init(_as_rng(rng_seed), P, lead + (P, P))
    return GatingLayer(Parameter(w), Parameter(np.zeros(lead + (P,))), (C, H, W), per_region)


class GateOutput(NamedTuple):
    weights: np.ndarray
    gated: np.ndarray
    V: np.ndarray
    region: int | None


def gate_forward(layer: GatingLayer, V, region: int | None = None) -> GateOutput:
    """weights = sigmoid(W flatten(V) + b); gated = V * weights.

    ``V`` is (C, H, W) or a batch (N, C, H, W).
    """
    V = np.asarray(V, dtype=np.float64)
    if V.shape[-3:] != tuple(layer.shape):
        raise ValueError(f"V shape {V.shape} does not match gate {layer.shape}")
    w, b = layer.slice(region)
    flat = V.reshape(V.shape[:-3] + (-1,))
    weights = net.sigmoid(flat @ w.T + b).reshape(V.shape)
    return GateOutput(weights, V * weights, V, region)


def gate_backward(layer: GatingLayer, cached: GateOutput | None, grad_gated):
    if cached is None:
        raise RuntimeError("gate_backward called without a cached forward pass")
    grad_gated = np.asarray(grad_gated, dtype=np.float64)
    if grad_gated.shape != cached.V.shape:
        raise ValueError("grad shape does not match gate output")
    w, _ = layer.slice(cached.region)
    lead = cached.V.shape[:-3]
    s = cached.weights.reshape(lead + (-1,))
    v = cached.V.reshape(lead + (-1,))
    g = grad_gated.reshape(lead + (-1,))
    g_logit = g * v * s * (1.0 - s)
    grad_V = g * s + g_logit @ w
    g2 = g_logit.reshape(-1, g_logit.shape[-1])
    v2 = v.reshape(-1, v.shape[-1])
    gw = g2.T @ v2
    gb = g2.sum(axis=0)
    if layer.per_region:
        full_w = np.zeros_like(layer.w.value)
        full_b = np.zeros_like(layer.b.value)
        full_w[cached.region] = gw
        full_b[cached.region] = gb
        gw, gb = full_w, full_b
    return {"w": gw, "b": gb}, grad_V.reshape(cached.V.shape)


# ---------------------------------------------------------------- pooling


class PoolOutput(NamedTuple):
    pooled: np.ndarray
    argmax: np.ndarray | None
    shape: tuple[int, ...]
    mode: str


def regionlet_pool(gated_V, mode: str = "max") -> PoolOutput:
    """Global max or mean over the H x W grid, per channel.

    Max ties resolve to the first row-major position.
    """
    if mode not in POOL_MODES:
        raise ValueError(f"unknown pool mode {mode!r}")
    V = np.asarray(gated_V, dtype=np.float64)
    flat = V.reshape(V.shape[:-2] + (-1,))
    if mode == "max":
        idx = flat.argmax(axis=-1)
        pooled = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return PoolOutput(pooled, idx, V.shape, mode)
    return PoolOutput(flat.mean(axis=-1), None, V.shape, mode)


def pool_backward(mode: str, cached: PoolOutput | None, grad_pooled) -> np.ndarray:
    if cached is None:
        raise RuntimeError("pool_backward called without a cached forward pass")
    if mode != cached.mode:
        raise ValueError("pool mode differs from the cached forward pass")
    grad_pooled = np.asarray(grad_pooled, dtype=np.float64)
    shape = cached.shape
    n = shape[-2] * shape[-1]
    if mode == "max":
        out = np.zeros(shape[:-2] + (n,))
        np.put_along_axis(out, cached.argmax[..., None], grad_pooled[..., None], axis=-1)
        return out.reshape(shape)
    return np.broadcast_to((grad_pooled / n)[..., None, None], shape).copy()


# ---------------------------------------------------------------- assembled module


@dataclass
class _HeadState:
    theta: np.ndarray
    rsn: RsnCache
    region: SampledRegion
    gate: GateOutput | None
    pool: PoolOutput


@dataclass
class ExtractCache:
    heads: list
    gate: GatingLayer | None
    U: np.ndarray
    roi_features: np.ndarray
    states: list[_HeadState]
    gating_enabled: bool
    pool_mode: str
    batched: bool


@dataclass
class RegionletFeature:
    pooled: np.ndarray
    argmax: np.ndarray | None
    cache: ExtractCache = field(repr=False)

    @property
    def thetas(self) -> np.ndarray:
        t = np.stack([s.theta for s in self.cache.states], axis=-2)
        return t if self.cache.batched else t[0]


class RegionletGrads(NamedTuple):
    U: np.ndarray
    heads: list[dict]
    gate: dict
    roi_feature: np.ndarray
    theta: np.ndarray


def regionlet_extract_batch_forward(heads, gate, U, batch_index, rois, roi_features,
                                    H: int, W: int, pool_mode: str = "max",
                                    gating_enabled: bool = True) -> RegionletFeature:
    """Pooled regionlet features (N, K, C) for N proposals over a map stack."""
    if pool_mode not in POOL_MODES:
        raise ValueError(f"unknown pool mode {pool_mode!r}")
    U = np.asarray(U, dtype=np.float64)
    roi_features = np.asarray(roi_features, dtype=np.float64)
    if gating_enabled:
        if gate is None:
            raise ValueError("gating enabled but no gating layer given")
        if tuple(gate.shape) != (U.shape[1], H, W):
            raise ValueError(f"gate shape {gate.shape} does not match (C, H, W)")
    states = []
    pooled = []
    argmax = []
    for k, head in enumerate(heads):
        theta = rsn_forward(head, roi_features)
        region = sample_batch_forward(U, batch_index, theta, rois, H, W)
        if gating_enabled:
            g = gate_forward(gate, region.values, region=k if gate.per_region else None)
            gated = g.gated
        else:
            g = None
            gated = region.values
        p = regionlet_pool(gated, pool_mode)
        states.append(_HeadState(theta, head.cache, region, g, p))
        pooled.append(p.pooled)
        argmax.append(p.argmax)
    cache = ExtractCache(list(heads), gate, U, roi_features, states,
                         gating_enabled, pool_mode, batched=True)
    return RegionletFeature(
        pooled=np.stack(pooled, axis=1),
        argmax=np.stack(argmax, axis=1) if pool_mode == "max" else None,
        cache=cache,
    )


def regionlet_extract_forward(heads, gate, U, roi, roi_feature, H: int, W: int,
                              pool_mode: str = "max", gating_enabled: bool = True) -> RegionletFeature:
    """Single proposal: U (C, Hin, Win), roi (4,) or RegionOfInterest,
    roi_feature (D,). Returns pooled features (K, C)."""
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 3:
        raise ValueError(f"feature map must be (C, Hin, Win), got {U.shape}")
    out = regionlet_extract_batch_forward(
        heads, gate, U[None], np.zeros(1, dtype=np.int64), _roi_array(roi)[None],
        np.asarray(roi_feature, dtype=np.float64)[None], H, W, pool_mode, gating_enabled,
    )
    out.pooled = out.pooled[0]
    out.argmax = None if out.argmax is None else out.argmax[0]
    out.cache.batched = False
    return out


def regionlet_extract_backward(feature: RegionletFeature | None, grad_feature) -> RegionletGrads:
    """Chain pooled-feature gradients back to U, the heads, the gate and the
    roi features. grad_U accumulates over every region."""
    if feature is None or feature.cache is None:
        raise RuntimeError("regionlet_extract_backward called without a cached forward pass")
    cache = feature.cache
    grad_feature = np.asarray(grad_feature, dtype=np.float64)
    if grad_feature.shape != feature.pooled.shape:
        raise ValueError(f"grad shape {grad_feature.shape} does not match {feature.pooled.shape}")
    if not cache.batched:
        grad_feature = grad_feature[None]
    grad_U = np.zeros_like(cache.U)
    grad_x = np.zeros_like(cache.roi_features)
    gate = cache.gate
    grad_gate = (
        {"w": np.zeros_like(gate.w.value), "b": np.zeros_like(gate.b.value)}
        if gate is not None else {}
    )
    head_grads = []
    thetas = []
    for k, (head, st) in enumerate(zip(cache.heads, cache.states)):
        g_gated = pool_backward(cache.pool_mode, st.pool, grad_feature[:, k])
        if cache.gating_enabled:
            gg, g_V = gate_backward(gate, st.gate, g_gated)
            grad_gate["w"] += gg["w"]
            grad_gate["b"] += gg["b"]
        else:
            g_V = g_gated
        grad_U += sample_batch_backward_input(st.region, g_V)
        g_theta = sample_batch_backward_theta(st.region, cache.U, g_V)
        g_theta = g_theta * free_slots(head.mode)
        hg, gx = rsn_backward(head, cache.roi_features, g_theta, cache=st.rsn)
        grad_x += gx
        head_grads.append(hg)
        thetas.append(g_theta)
    theta = np.stack(thetas, axis=1)
    if not cache.batched:
        return RegionletGrads(grad_U[0], head_grads, grad_gate, grad_x[0], theta[0])
    return RegionletGrads(grad_U, head_grads, grad_gate, grad_x, theta)

"""Bilinear sampling of feature maps on projective grids, with analytic backward.

Single-region entry points (``sample_forward``, ``sample_backward_input``,
``sample_backward_theta``) take a feature map of shape (C, Hin, Win). The
``*_batch`` variants sample N regions at once from a stack of B maps of shape
(B, C, Hin, Win); ``batch_index`` names the map each region reads from.

Each target point touches at most four lattice neighbours, stored in the
order (n0, m0), (n0, m0+1), (n0+1, m0), (n0+1, m0+1). Neighbours outside the
map are dropped (zero padding).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    GridPoints,
    SourcePoints,
    _roi_array,
    _theta_array,
    apply_transform,
    denormalize,
    make_target_grid,
)

# neighbour offsets (dn, dm) in storage order
_DN = np.array([0, 0, 1, 1])
_DM = np.array([0, 1, 0, 1])


@dataclass
class SampleRecords:
    """Per-point sampling state cached for the backward pass.

    Arrays carry a leading region axis N and a point axis P; the neighbour
    axis has length 4. ``index`` is the flat spatial offset n * Win + m, or -1
    for neighbours outside the map (their ``weight`` is 0).
    """

    x_abs: np.ndarray
    y_abs: np.ndarray
    z: np.ndarray
    index: np.ndarray
    weight: np.ndarray
    # gathered neighbour values (N, P, 4, C), kept for the theta gradient
    values: np.ndarray | None = None

    def __len__(self):
        return self.x_abs.shape[-1]


@dataclass
class SampledRegion:
    values: np.ndarray
    records: SampleRecords
    theta: np.ndarray
    roi: np.ndarray
    grid: GridPoints
    source: SourcePoints
    batch_index: np.ndarray
    input_shape: tuple[int, int, int, int]
    batched: bool = False

    @property
    def out_shape(self) -> tuple[int, int]:
        return self.values.shape[-2:]


def eta(d):
    """Sign kernel for d = x - m: +1 if the lattice point is above x, -1 if
    below, 0 when |d| >= 1 or d == 0 (kinks get zero gradient)."""
    d = np.asarray(d, dtype=np.float64)
    out = np.where(d < 0, 1.0, -1.0)
    out = np.where((np.abs(d) >= 1.0) | (d == 0.0), 0.0, out)
    return out if out.ndim else float(out)


def _as_map_stack(U) -> np.ndarray:
    U = np.asarray(U)
    if U.dtype != np.float32:
        U = U.astype(np.float64, copy=False)
    if U.ndim != 4 or min(U.shape) < 1:
        raise ValueError(f"feature maps must be (B, C, Hin, Win), got {U.shape}")
    if not np.all(np.isfinite(U)):
        raise ValueError("feature map contains non-finite values")
    return U


def bilinear_records(x_abs, y_abs, z, Hin: int, Win: int) -> SampleRecords:
    """Neighbour indices and tent-kernel weights for absolute coordinates."""
    m0 = np.floor(x_abs)
    n0 = np.floor(y_abs)
    fx = x_abs - m0
    fy = y_abs - n0
    kx = np.stack([1.0 - fx, fx, 1.0 - fx, fx], axis=-1)
    ky = np.stack([1.0 - fy, 1.0 - fy, fy, fy], axis=-1)
    m = m0[..., None].astype(np.int64) + _DM
    n = n0[..., None].astype(np.int64) + _DN
    valid = (m >= 0) & (m < Win) & (n >= 0) & (n < Hin)
    weight = np.where(valid, kx * ky, 0.0).astype(x_abs.dtype)
    index = np.where(valid, n * Win + m, -1)
    return SampleRecords(x_abs, y_abs, z, index, weight)


def _gather(U: np.ndarray, batch_index: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Neighbour values, shape (N, P, 4, C); out-of-map neighbours read 0."""
    B, C, Hin, Win = U.shape
    flat = U.reshape(B, C, Hin * Win).transpose(0, 2, 1)
    vals = flat[batch_index[:, None, None], np.maximum(index, 0)]
    return np.where((index >= 0)[..., None], vals, 0.0)


def sample_batch_forward(U, batch_index, theta, roi, H: int, W: int) -> SampledRegion:
    """Sample N regions: theta (N, 9), roi (N, 4), batch_index (N,)."""
    U = _as_map_stack(U)
    theta = _theta_array(theta)
    if not np.all(np.isfinite(theta)):
        raise ValueError("transform parameters must be finite")
    theta = theta.astype(U.dtype, copy=False)
    roi = _roi_array(roi).astype(U.dtype, copy=False)
    batch_index = np.asarray(batch_index, dtype=np.int64)
    N = theta.shape[0]
    if theta.shape != (N, 9) or roi.shape != (N, 4) or batch_index.shape != (N,):
        raise ValueError("theta, roi and batch_index must share the region axis")
    if np.any((batch_index < 0) | (batch_index >= U.shape[0])):
        raise ValueError("batch_index out of range")

    grid = make_target_grid(H, W)
    src = apply_transform(theta, grid.xt, grid.yt)
    x_abs, y_abs = denormalize(src, roi)
    rec = bilinear_records(x_abs, y_abs, src.z, U.shape[2], U.shape[3])
    vals = _gather(U, batch_index, rec.index)
    rec.values = vals
    V = np.einsum("npkc,npk->ncp", vals, rec.weight)
    C = U.shape[1]
    return SampledRegion(
        values=V.reshape(N, C, H, W),
        records=rec,
        theta=theta,
        roi=roi,
        grid=grid,
        source=src,
        batch_index=batch_index,
        input_shape=U.shape,
        batched=True,
    )


def sample_forward(U, t, roi, H: int, W: int) -> SampledRegion:
    """Sample one region of a (C, Hin, Win) map onto an H x W grid."""
    U = np.asarray(U)
    if U.ndim != 3:
        raise ValueError(f"feature map must be (C, Hin, Win), got {U.shape}")
    theta = _theta_array(t)[None]
    roi = _roi_array(roi)[None]
    region = sample_batch_forward(U[None], np.zeros(1, dtype=np.int64), theta, roi, H, W)
    region.values = region.values[0]
    region.batched = False
    return region


def _batched_grad(region: SampledRegion, grad_V) -> np.ndarray:
    grad_V = np.asarray(grad_V, dtype=region.records.weight.dtype)
    if grad_V.shape != region.values.shape:
        raise ValueError(
            f"grad_V shape {grad_V.shape} does not match values {region.values.shape}"
        )
    if not region.batched:
        grad_V = grad_V[None]
    N, C = grad_V.shape[:2]
    return grad_V.reshape(N, C, -1)


def sample_batch_backward_input(region: SampledRegion, grad_V) -> np.ndarray:
    """Scatter grad_V back onto the (B, C, Hin, Win) map stack."""
    g = _batched_grad(region, grad_V)
    B, C, Hin, Win = region.input_shape
    rec = region.records
    size = B * C * Hin * Win
    # contributions (N, C, P, 4); out-of-map neighbours land in a spare bin
    contrib = g[..., None] * rec.weight[:, None, :, :]
    base = (region.batch_index[:, None] * C + np.arange(C)) * (Hin * Win)
    flat = base[:, :, None, None] + rec.index[:, None, :, :]
    flat = np.where(rec.index[:, None, :, :] >= 0, flat, size)
    out = np.bincount(flat.reshape(-1), weights=contrib.reshape(-1), minlength=size + 1)
    return out[:size].astype(rec.weight.dtype, copy=False).reshape(B, C, Hin, Win)


def sample_backward_input(region: SampledRegion, grad_V, Hin: int, Win: int) -> np.ndarray:
    """Gradient of the loss w.r.t. the sampled map, from cached weights."""
    if (Hin, Win) != tuple(region.input_shape[2:]):
        raise ValueError("Hin/Win do not match the sampled feature map")
    grad_U = sample_batch_backward_input(region, grad_V)
    return grad_U if region.batched else grad_U[0]


def source_coordinate_grads(region: SampledRegion, U, grad_V):
    """Per-point loss gradients w.r.t. normalized (xs, ys), each (N, P)."""
    g = _batched_grad(region, grad_V)
    U = np.asarray(U)
    if not region.batched:
        U = U[None]
    if U.shape != tuple(region.input_shape):
        raise ValueError("U does not match the sampled feature map")
    rec = region.records
    vals = rec.values if rec.values is not None else _gather(U, region.batch_index, rec.index)
    fx = rec.x_abs - np.floor(rec.x_abs)
    fy = rec.y_abs - np.floor(rec.y_abs)
    sx = (fx > 0).astype(fx.dtype)
    sy = (fy > 0).astype(fy.dtype)
    one = np.ones_like(fx)
    # eta and tent weights per neighbour (N, P, 4)
    eta_x = np.stack([-sx, sx, -sx, sx], axis=-1)
    eta_y = np.stack([-sy, -sy, sy, sy], axis=-1)
    ker_x = np.stack([one - fx, fx, one - fx, fx], axis=-1)
    ker_y = np.stack([one - fy, one - fy, fy, fy], axis=-1)
    dV_dx = np.einsum("npkc,npk->ncp", vals, ker_y * eta_x)
    dV_dy = np.einsum("npkc,npk->ncp", vals, ker_x * eta_y)
    gx = np.einsum("ncp,ncp->np", g, dV_dx)
    gy = np.einsum("ncp,ncp->np", g, dV_dy)
    w = region.roi[:, 2:3]
    h = region.roi[:, 3:4]
    return gx * (w - 1.0) / 2.0, -gy * (h - 1.0) / 2.0


def sample_batch_backward_theta(region: SampledRegion, U, grad_V) -> np.ndarray:
    """Loss gradients w.r.t. the eight free parameters, shape (N, 8)."""
    gxs, gys = source_coordinate_grads(region, U, grad_V)
    xt, yt = region.grid
    src = region.source
    z = src.z
    xs, ys = src.xs, src.ys
    ax = gxs / z
    ay = gys / z
    mix = (gxs * xs + gys * ys) / z
    return np.stack([
        (ax * xt).sum(-1),
        (ax * yt).sum(-1),
        ax.sum(-1),
        (ay * xt).sum(-1),
        (ay * yt).sum(-1),
        ay.sum(-1),
        -(mix * xt).sum(-1),
        -(mix * yt).sum(-1),
    ], axis=-1)


def sample_backward_theta(region: SampledRegion, U, grad_V) -> np.ndarray:
    g = sample_batch_backward_theta(region, U, grad_V)
    return g if region.batched else g[0]


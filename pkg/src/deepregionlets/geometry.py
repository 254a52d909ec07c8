"""Normalized projective transforms, target grids and cell initialization.

Normalized coordinates live in [-1, 1] with y pointing UP; pixel space has
rows growing downward. All functions broadcast over leading batch axes:
a theta array of shape (..., 9) applied to P grid points gives (..., P).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

Z_EPSILON = 1e-6

# absolute pixel coordinates this close to an integer are snapped onto it
LATTICE_SNAP = 1e-9

IDENTITY_THETA = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)


@dataclass(frozen=True)
class ProjectiveTransform:
    """Row-major 3x3 parameters [t1 t2 t3; t4 t5 t6; t7 t8 t9] with t9 == 1."""

    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if theta.size == 8:
            theta = np.append(theta, 1.0)
        if theta.size != 9:
            raise ValueError(f"expected 8 or 9 parameters, got {theta.size}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("transform parameters must be finite")
        theta[8] = 1.0
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    @classmethod
    def identity(cls) -> "ProjectiveTransform":
        return cls(IDENTITY_THETA)

    @property
    def matrix(self) -> np.ndarray:
        return self.theta.reshape(3, 3)

    def is_affine(self) -> bool:
        return self.theta[6] == 0.0 and self.theta[7] == 0.0


@dataclass(frozen=True)
class AffineTransform:
    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if theta.size != 6:
            raise ValueError(f"expected 6 affine parameters, got {theta.size}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("transform parameters must be finite")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    def to_projective(self) -> ProjectiveTransform:
        return ProjectiveTransform(np.concatenate([self.theta, [0.0, 0.0, 1.0]]))

    def apply(self, xt, yt):
        """Direct affine evaluation (no divisor)."""
        t = self.theta
        xt = np.asarray(xt, dtype=np.float64)
        yt = np.asarray(yt, dtype=np.float64)
        return t[0] * xt + t[1] * yt + t[2], t[3] * xt + t[4] * yt + t[5]


@dataclass(frozen=True)
class RegionOfInterest:
    """Proposal box in feature-map pixels: top-left (w0, h0), size w x h."""

    w0: float
    h0: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.w0, self.h0, self.w, self.h)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("roi must be finite")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"roi size must be positive, got {self.w}x{self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.w0, self.h0, self.w, self.h], dtype=np.float64)


class GridPoints(NamedTuple):
    xt: np.ndarray
    yt: np.ndarray


class SourcePoints(NamedTuple):
    xs: np.ndarray
    ys: np.ndarray
    z: np.ndarray
    # True where |z| was raised to Z_EPSILON; clamped.sum() counts clamp events
    clamped: np.ndarray


def _theta_array(t) -> np.ndarray:
    if isinstance(t, ProjectiveTransform):
        return t.theta
    if isinstance(t, AffineTransform):
        return t.to_projective().theta
    theta = np.asarray(t)
    if theta.dtype != np.float32:
        theta = theta.astype(np.float64, copy=False)
    if theta.shape[-1] != 9:
        raise ValueError(f"theta must have trailing dimension 9, got {theta.shape}")
    return theta


def _roi_array(roi) -> np.ndarray:
    if isinstance(roi, RegionOfInterest):
        return roi.as_array()
    roi = np.asarray(roi, dtype=np.float64)
    if roi.shape[-1] != 4:
        raise ValueError(f"roi must have trailing dimension 4, got {roi.shape}")
    return roi


def apply_transform(t, xt, yt) -> SourcePoints:
    """Map target points through the projective transform.

    ``t`` is a transform object or a theta array of shape (..., 9); the
    points are arrays of shape (P,) (or scalars). The divisor is clamped to
    ``sign(z) * max(|z|, Z_EPSILON)``.
    """
    theta = _theta_array(t)
    xt = np.asarray(xt, dtype=theta.dtype)
    yt = np.asarray(yt, dtype=theta.dtype)
    th = [theta[..., i, None] if theta.ndim > 1 else theta[i] for i in range(8)]
    z = th[6] * xt + th[7] * yt + 1.0
    clamped = np.abs(z) < Z_EPSILON
    if np.any(clamped):
        z = np.where(clamped, np.where(z < 0, -Z_EPSILON, Z_EPSILON), z).astype(z.dtype)
    xs = (th[0] * xt + th[1] * yt + th[2]) / z
    ys = (th[3] * xt + th[4] * yt + th[5]) / z
    return SourcePoints(xs, ys, z, clamped)


def make_target_grid(H: int, W: int) -> GridPoints:
    """Align-corners lattice over [-1, 1]^2, row-major, y decreasing down rows."""
    if H < 1 or W < 1:
        raise ValueError(f"grid size must be positive, got {H}x{W}")
    cols = np.zeros(W) if W == 1 else -1.0 + 2.0 * np.arange(W) / (W - 1)
    rows = np.zeros(H) if H == 1 else 1.0 - 2.0 * np.arange(H) / (H - 1)
    yt, xt = np.meshgrid(rows, cols, indexing="ij")
    return GridPoints(xt.reshape(-1), yt.reshape(-1))


def generate_grid(t, H: int, W: int) -> SourcePoints:
    grid = make_target_grid(H, W)
    return apply_transform(t, grid.xt, grid.yt)


def _snap(v: np.ndarray) -> np.ndarray:
    r = np.rint(v)
    return np.where(np.abs(v - r) <= LATTICE_SNAP, r, v)


def denormalize(s, roi):
    """Normalized source coordinates -> absolute (x, y) feature-map pixels.

    ``s`` is a SourcePoints (or any (xs, ys, ...) tuple); ``roi`` is a
    RegionOfInterest or an array (..., 4) matching the batch axes of ``s``.
    Results within LATTICE_SNAP of an integer are snapped onto it so that
    lattice-aligned grids reproduce pixel positions exactly.
    """
    xs, ys = np.asarray(s[0]), np.asarray(s[1])
    r = _roi_array(roi).astype(xs.dtype, copy=False)
    if r.ndim > 1:
        r = r[..., None, :]
    w0, h0, w, h = r[..., 0], r[..., 1], r[..., 2], r[..., 3]
    x_abs = w0 + (xs + 1.0) * (w - 1.0) / 2.0
    y_abs = h0 + (1.0 - ys) * (h - 1.0) / 2.0
    return _snap(x_abs), _snap(y_abs)


def cell_init_transforms(rows: int, cols: int) -> list[ProjectiveTransform]:
    """Transforms selecting each cell of a rows x cols tiling, row-major.

    Offsets are formed as integer ratios so they are correctly rounded
    (-2/3 rather than -1 + 1/3).
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"cell grid must be positive, got {rows}x{cols}")
    out = []
    for r in range(rows):
        for c in range(cols):
            out.append(ProjectiveTransform([
                1.0 / cols, 0.0, (2 * c + 1 - cols) / cols,
                0.0, 1.0 / rows, (rows - 2 * r - 1) / rows,
                0.0, 0.0, 1.0,
            ]))
    return out

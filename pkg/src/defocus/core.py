"""Raster conventions, bilinear sampling and the aperture mask.

Images are float arrays of shape (H, W, C); depth maps are (H, W).
Pixel coordinates are (y, x) with the origin at the top-left pixel centre.
Aperture coordinates u = (u_y, u_x) live on [-1, 1]^2 and disparity is
measured in pixels of image shift per unit of u, so a point whose
disparity differs from the focus disparity by r blurs to a disk of
radius r pixels.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

D_MIN = -15.0
D_MAX = 15.0


def as_image(arr, name: str = "image") -> np.ndarray:
    """Validate and return an (H, W, C) float64 array (2-D input gains C=1)."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[0] < 1 or a.shape[1] < 1 or a.shape[2] not in (1, 3):
        raise ValueError(f"{name} must be HxWxC with C in (1, 3), got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def as_depth(arr, name: str = "depth") -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} must be HxW, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def thread_count(threads: int | None = None) -> int:
    """Worker count: explicit argument, else DEFOCUS_THREADS, else 1."""
    if threads is None:
        threads = int(os.environ.get("DEFOCUS_THREADS", "1") or 1)
    return max(1, int(threads))


# -- bilinear sampling -------------------------------------------------------


def _cell(coord: np.ndarray, n: int):
    """Lower cell index, fractional offset and in-range mask along one axis.

    Coordinates are clamped to [0, n-1]. Lattice points use the cell to
    their right/below, except the last lattice point which closes the final
    cell. Clamped coordinates get a zero derivative.
    """
    inside = (coord >= 0.0) & (coord <= n - 1)
    if n == 1:
        zero = np.zeros(coord.shape, dtype=np.intp)
        return zero, zero, np.zeros(coord.shape), np.zeros(coord.shape, dtype=bool)
    c = np.clip(coord, 0.0, n - 1)
    i0 = np.minimum(np.floor(c).astype(np.intp), n - 2)
    return i0, i0 + 1, c - i0, inside


class BilinearLookup:
    """Bilinear lookups at fixed continuous positions into an (H, W[, C]) grid.

    The same positions can be used to sample several grids, to get the
    derivative of the interpolant with respect to the positions, and to
    scatter gradients back onto the grid (the adjoint of ``sample``).
    """

    def __init__(self, shape_hw: tuple[int, int], ys: np.ndarray, xs: np.ndarray):
        h, w = shape_hw
        self.shape_hw = (h, w)
        ys = np.asarray(ys, dtype=np.float64)
        xs = np.asarray(xs, dtype=np.float64)
        y0, y1, fy, iny = _cell(ys, h)
        x0, x1, fx, inx = _cell(xs, w)
        self.y0, self.x0 = y0, x0
        self.fy, self.fx = fy, fx
        self.iny, self.inx = iny, inx
        r0, r1 = y0 * w, y1 * w
        self.idx = np.stack([r0 + x0, r0 + x1, r1 + x0, r1 + x1])
        gy, gx = 1.0 - fy, 1.0 - fx
        self.wts = np.stack([gy * gx, gy * fx, fy * gx, fy * fx])
        self._cached = None
        self._corner_vals = None

    def signature(self) -> np.ndarray:
        """Cell indices and clamp flags; equal signatures mean no kink was crossed."""
        return np.stack([self.y0, self.x0, self.iny, self.inx]).astype(np.int64)

    def _corners(self, grid: np.ndarray) -> np.ndarray:
        if self._cached is grid:
            return self._corner_vals
        h, w = self.shape_hw
        flat = grid.reshape(h * w, *grid.shape[2:])
        vals = flat.take(self.idx, axis=0)
        self._cached, self._corner_vals = grid, vals
        return vals

    def sample(self, grid: np.ndarray) -> np.ndarray:
        v = self._corners(grid)
        wts = self.wts[..., None] if grid.ndim == 3 else self.wts
        return np.einsum("k...,k...->...", wts, v) if grid.ndim == 2 else (wts * v).sum(axis=0)

    def grad(self, grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Partial derivatives of the interpolant with respect to (y, x)."""
        v00, v01, v10, v11 = self._corners(grid)
        fy, fx, iny, inx = self.fy, self.fx, self.iny, self.inx
        if grid.ndim == 3:
            fy, fx, iny, inx = fy[..., None], fx[..., None], iny[..., None], inx[..., None]
        dy = v10 - v00
        dy += fx * (v11 - v01 - dy)
        dx = v01 - v00
        dx += fy * (v11 - v10 - dx)
        return dy * iny, dx * inx

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        """Scatter per-lookup gradients ``g`` back onto the grid."""
        h, w = self.shape_hw
        n = h * w
        if g.ndim == self.fy.ndim:
            out = np.bincount(self.idx.ravel(), weights=(self.wts * g).ravel(), minlength=n)
            return out.reshape(h, w)
        chans = g.shape[-1]
        out = np.zeros((n, chans))
        for c in range(chans):
            out[:, c] = np.bincount(self.idx.ravel(), weights=(self.wts * g[..., c]).ravel(), minlength=n)
        return out.reshape(h, w, chans)


def sample_bilinear(img, y: float, x: float, c: int = 0) -> float:
    """Clamp-to-edge bilinear lookup of channel ``c`` at (y, x)."""
    img = as_image(img)
    look = BilinearLookup(img.shape[:2], np.array(y), np.array(x))
    return float(look.sample(img[:, :, c]))


def sample_bilinear_grad(img, y: float, x: float, c: int = 0) -> tuple[float, float]:
    img = as_image(img)
    look = BilinearLookup(img.shape[:2], np.array(y), np.array(x))
    dy, dx = look.grad(img[:, :, c])
    return float(dy), float(dx)


# -- aperture ------------------------------------------------------------------


@dataclass(frozen=True)
class ApertureMask:
    """Uniform m x m grid of aperture positions with disk-indicator weights."""

    m: int
    coords: np.ndarray = field(repr=False)  # (m, m, 2) as (u_y, u_x)
    weights: np.ndarray = field(repr=False)  # (m, m)

    @property
    def weight_sum(self) -> float:
        return float(self.weights.sum())

    def views(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinates (V, 2) and normalized weights (V,) of the views with nonzero weight."""
        keep = self.weights.ravel() != 0
        u = self.coords.reshape(-1, 2)[keep]
        w = self.weights.ravel()[keep] / self.weight_sum
        return u, w


def make_aperture(m: int) -> ApertureMask:
    if int(m) != m or m < 1:
        raise ValueError(f"aperture grid size must be a positive integer, got {m}")
    m = int(m)
    axis = np.zeros(1) if m == 1 else np.linspace(-1.0, 1.0, m)
    uy, ux = np.meshgrid(axis, axis, indexing="ij")
    coords = np.stack([uy, ux], axis=-1)
    weights = (uy**2 + ux**2 <= 1.0 + 1e-12).astype(np.float64)
    return ApertureMask(m=m, coords=coords, weights=weights)

"""Compiled per-ray loops for the light-field renderer.

These mirror the vectorized reference path in ``lfrender`` exactly, down to
the cell and clamping conventions, and exist only for speed. Arrays
are indexed (view, y, x) and every loop is serial, so results do not
depend on scheduling.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _cell(c, n):
    inside = 0.0 <= c <= n - 1
    if n == 1:
        return 0, 0.0, False
    if c < 0.0:
        c = 0.0
    elif c > n - 1:
        c = n - 1.0
    i0 = min(int(math.floor(c)), n - 2)
    return i0, c - i0, inside


@njit(cache=True, inline="always")
def _sample(G, y, x):
    h, w = G.shape
    y0, fy, _ = _cell(y, h)
    x0, fx, _ = _cell(x, w)
    y1 = y0 + 1 if h > 1 else 0
    x1 = x0 + 1 if w > 1 else 0
    top = (1.0 - fx) * G[y0, x0] + fx * G[y0, x1]
    bot = (1.0 - fx) * G[y1, x0] + fx * G[y1, x1]
    return (1.0 - fy) * top + fy * bot


@njit(cache=True, inline="always")
def _seed(Z, a, b, py, px, top, bottom):
    h, w = Z.shape
    for z in range(top, bottom, -1):
        iy = min(max(np.rint(py + a * z), 0.0), h - 1.0)
        ix = min(max(np.rint(px + b * z), 0.0), w - 1.0)
        if Z[int(iy), int(ix)] >= z:
            return float(z)
    return float(bottom)


@njit(cache=True, nogil=True)
def expand_forward(Z, uy, ux, focus, iters, lo, hi, front):
    """Seeded fixed-point depth expansion; returns lookup positions, clamp masks and final depth."""
    h, w = Z.shape
    nv = uy.shape[0]
    sy = np.empty((nv, iters + 1, h, w))
    sx = np.empty((nv, iters + 1, h, w))
    act = np.empty((nv, iters + 1, h, w), dtype=np.bool_)
    D = np.empty((nv, h, w))
    top = int(math.ceil(Z.max()))
    bottom = int(math.floor(Z.min()))
    for v in range(nv):
        a, b = uy[v], ux[v]
        for y in range(h):
            for x in range(w):
                py = y - a * focus
                px = x - b * focus
                d = _seed(Z, a, b, py, px, top, bottom) if front else 0.0
                for k in range(iters + 1):
                    qy = py + a * d
                    qx = px + b * d
                    sy[v, k, y, x] = qy
                    sx[v, k, y, x] = qx
                    raw = _sample(Z, qy, qx)
                    act[v, k, y, x] = lo <= raw <= hi
                    d = min(max(raw, lo), hi)
                D[v, y, x] = d
    return sy, sx, act, D


@njit(cache=True, nogil=True)
def render_forward(I, Z, uy, ux, wts, focus, iters, lo, hi, front):
    """``expand_forward`` followed by ``warp_forward`` without keeping the reverse-pass tape."""
    h, w, c = I.shape
    out = np.zeros((h, w, c))
    top = int(math.ceil(Z.max()))
    bottom = int(math.floor(Z.min()))
    for v in range(uy.shape[0]):
        a, b, wt = uy[v], ux[v], wts[v]
        for y in range(h):
            for x in range(w):
                py = y - a * focus
                px = x - b * focus
                d = _seed(Z, a, b, py, px, top, bottom) if front else 0.0
                for k in range(iters + 1):
                    d = min(max(_sample(Z, py + a * d, px + b * d), lo), hi)
                qy = y - a * focus + a * d
                qx = x - b * focus + b * d
                for ch in range(c):
                    out[y, x, ch] += wt * _sample(I[:, :, ch], qy, qx)
    return out


@njit(cache=True, nogil=True)
def expand_backward(Z, uy, ux, sy, sx, act, dD):
    """Pull a per-view depth gradient back onto Z and the ray start positions."""
    h, w = Z.shape
    nv, n = sy.shape[0], sy.shape[1]
    dZ = np.zeros((h, w))
    dpy = np.zeros((nv, h, w))
    dpx = np.zeros((nv, h, w))
    for v in range(nv):
        a, b = uy[v], ux[v]
        for y in range(h):
            for x in range(w):
                g = dD[v, y, x]
                ty = 0.0
                tx = 0.0
                for k in range(n - 1, -1, -1):
                    if not act[v, k, y, x]:
                        g = 0.0
                    if g == 0.0:
                        break
                    y0, fy, iny = _cell(sy[v, k, y, x], h)
                    x0, fx, inx = _cell(sx[v, k, y, x], w)
                    y1 = y0 + 1 if h > 1 else 0
                    x1 = x0 + 1 if w > 1 else 0
                    dZ[y0, x0] += g * (1 - fy) * (1 - fx)
                    dZ[y0, x1] += g * (1 - fy) * fx
                    dZ[y1, x0] += g * fy * (1 - fx)
                    dZ[y1, x1] += g * fy * fx
                    v00, v01, v10, v11 = Z[y0, x0], Z[y0, x1], Z[y1, x0], Z[y1, x1]
                    gy = (v10 - v00 + fx * (v11 - v01 - v10 + v00)) * g if iny else 0.0
                    gx = (v01 - v00 + fy * (v11 - v10 - v01 + v00)) * g if inx else 0.0
                    ty += gy
                    tx += gx
                    g = a * gy + b * gx
                dpy[v, y, x] = ty
                dpx[v, y, x] = tx
    return dZ, dpy, dpx


@njit(cache=True, nogil=True)
def warp_forward(I, uy, ux, wts, focus, D):
    """Weighted sum over views of I sampled at p + u D with p = x - u focus."""
    h, w, c = I.shape
    out = np.zeros((h, w, c))
    for v in range(uy.shape[0]):
        a, b, wt = uy[v], ux[v], wts[v]
        for y in range(h):
            for x in range(w):
                d = D[v, y, x]
                qy = y - a * focus + a * d
                qx = x - b * focus + b * d
                for ch in range(c):
                    out[y, x, ch] += wt * _sample(I[:, :, ch], qy, qx)
    return out


@njit(cache=True, nogil=True)
def warp_backward(I, uy, ux, wts, focus, D, upstream):
    """Gradient of sum(upstream * warp_forward) with respect to the sample positions q."""
    h, w, c = I.shape
    nv = uy.shape[0]
    dqy = np.zeros((nv, h, w))
    dqx = np.zeros((nv, h, w))
    for v in range(nv):
        a, b, wt = uy[v], ux[v], wts[v]
        for y in range(h):
            for x in range(w):
                d = D[v, y, x]
                y0, fy, iny = _cell(y - a * focus + a * d, h)
                x0, fx, inx = _cell(x - b * focus + b * d, w)
                y1 = y0 + 1 if h > 1 else 0
                x1 = x0 + 1 if w > 1 else 0
                gy = 0.0
                gx = 0.0
                for ch in range(c):
                    v00, v01 = I[y0, x0, ch], I[y0, x1, ch]
                    v10, v11 = I[y1, x0, ch], I[y1, x1, ch]
                    up = wt * upstream[y, x, ch]
                    gy += up * (v10 - v00 + fx * (v11 - v01 - v10 + v00))
                    gx += up * (v01 - v00 + fy * (v11 - v10 - v01 + v00))
                dqy[v, y, x] = gy if iny else 0.0
                dqx[v, y, x] = gx if inx else 0.0
    return dqy, dqx

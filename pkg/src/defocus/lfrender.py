"""Light-field aperture rendering with reverse-mode gradients.

The central depth map Z is expanded to a depth per view by iterating the
backward lookup D(x, u) = Z(x + u D(x, u)), the all-in-focus image is
warped into every view with L(x, u) = I(x + u D(x, u)), and the views are
sheared by -u*focus and averaged over the aperture. With this sign
convention a surface at disparity equal to the focus disparity renders
sharp.

``render_light_field`` evaluates each view directly at its sheared,
continuous position instead of resampling a lattice light field, so the
in-focus identity holds to rounding error.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _lfkernel
from .core import D_MAX, D_MIN, ApertureMask, BilinearLookup, _cell, as_depth, as_image, thread_count

VIEW_CHUNK = 24
BACKENDS = ("compiled", "numpy")


@dataclass(frozen=True)
class LfRenderConfig:
    aperture: ApertureMask
    focus: float = 0.0
    expansion_iters: int = 3
    d_min: float = D_MIN
    d_max: float = D_MAX
    front_search: bool = True
    backend: str = "compiled"

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if self.expansion_iters < 1:
            raise ValueError("expansion_iters must be >= 1")
        if not self.d_min <= self.focus <= self.d_max:
            raise ValueError(f"focus {self.focus} outside [{self.d_min}, {self.d_max}]")


def _grid(h: int, w: int):
    return np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")


def front_start(Z, uy, ux, py, px) -> np.ndarray:
    """Nearest-to-camera integer disparity whose ray lands on a surface at least that close.

    Scans candidates z from ceil(max Z) down to floor(min Z) and keeps, per
    view and pixel, the first z with Z(p + u z) >= z (nearest-neighbour
    lookups). The fixed-point iteration started there converges to the
    front-most surface along the ray instead of the surface seen from the
    centre, which is what makes foreground blur spill over background
    pixels. For u = 0 the result is floor(Z(x)).
    """
    h, w = Z.shape
    top, bottom = int(np.ceil(Z.max())), int(np.floor(Z.min()))
    shape = np.broadcast_shapes(np.shape(py), np.shape(uy))
    start = np.full(shape, float(bottom))
    todo = np.ones(shape, dtype=bool)
    for z in range(top, bottom, -1):
        iy = np.clip(np.rint(py + uy * z), 0, h - 1).astype(np.intp)
        ix = np.clip(np.rint(px + ux * z), 0, w - 1).astype(np.intp)
        hit = todo & (Z[iy, ix] >= z)
        start[hit] = z
        todo &= ~hit
        if not todo.any():
            break
    return start


class _Expansion:
    """K-step depth expansion for a batch of views starting at positions (py, px).

    With ``front`` set the iteration is seeded at Z(p + u z0) with z0 from
    ``front_start``; otherwise at Z(p) as in the plain backward-lookup rule.
    """

    def __init__(self, Z, uy, ux, py, px, iters, lo, hi, front=True):
        self.Z, self.uy, self.ux = Z, uy, ux
        self.tape = []
        if front:
            z0 = front_start(Z, uy, ux, py, px)
            look = BilinearLookup(Z.shape, py + uy * z0, px + ux * z0)
        else:
            look = BilinearLookup(Z.shape, py, px)
        raw = look.sample(Z)
        self.tape.append((look, (raw >= lo) & (raw <= hi)))
        D = np.clip(raw, lo, hi)
        for _ in range(iters):
            look = BilinearLookup(Z.shape, py + uy * D, px + ux * D)
            raw = look.sample(Z)
            self.tape.append((look, (raw >= lo) & (raw <= hi)))
            D = np.clip(raw, lo, hi)
        self.D = D

    def backward(self, dD):
        """Return (dZ, dpy, dpx) given the gradient on the final per-view depth."""
        dZ = np.zeros(self.Z.shape)
        dpy = np.zeros(dD.shape)
        dpx = np.zeros(dD.shape)
        for look, active in reversed(self.tape):
            g = dD * active
            dZ += look.adjoint(g)
            gy, gx = look.grad(self.Z)
            gy, gx = g * gy, g * gx
            dpy += gy
            dpx += gx
            dD = self.uy * gy + self.ux * gx
        # the seed offset u*z0 is piecewise constant, so the first lookup only feeds p
        return dZ, dpy, dpx

    def signatures(self):
        return [look.signature() for look, _ in self.tape]


class _ViewChunk:
    def __init__(self, I, Z, u, w, focus, iters, lo, hi, front):
        h, wd = Z.shape
        Y, X = _grid(h, wd)
        self.uy = u[:, 0, None, None]
        self.ux = u[:, 1, None, None]
        self.w = w
        self.I = I
        py = Y - self.uy * focus
        px = X - self.ux * focus
        self.exp = _Expansion(Z, self.uy, self.ux, py, px, iters, lo, hi, front)
        D = self.exp.D
        self.look = BilinearLookup(I.shape[:2], py + self.uy * D, px + self.ux * D)
        self.out = np.tensordot(w, self.look.sample(I), axes=(0, 0))

    def backward(self, upstream):
        gy, gx = self.look.grad(self.I)
        wg = self.w[:, None, None, None] * upstream[None]
        dqy = (wg * gy).sum(axis=-1)
        dqx = (wg * gx).sum(axis=-1)
        dD = self.uy * dqy + self.ux * dqx
        dZ, dpy, dpx = self.exp.backward(dD)
        dpy += dqy
        dpx += dqx
        dfocus = -float(np.sum(self.uy * dpy) + np.sum(self.ux * dpx))
        return dZ, dfocus

    def signatures(self):
        return self.exp.signatures() + [self.look.signature()]


class _CompiledChunk:
    """Same computation as ``_ViewChunk`` through the compiled per-ray loops."""

    def __init__(self, I, Z, u, w, focus, iters, lo, hi, front):
        self.I, self.Z, self.w, self.focus = I, Z, w, focus
        self.uy = np.ascontiguousarray(u[:, 0])
        self.ux = np.ascontiguousarray(u[:, 1])
        self.sy, self.sx, self.act, self.D = _lfkernel.expand_forward(
            Z, self.uy, self.ux, focus, iters, lo, hi, front)
        self.out = _lfkernel.warp_forward(I, self.uy, self.ux, w, focus, self.D)

    def backward(self, upstream):
        dqy, dqx = _lfkernel.warp_backward(self.I, self.uy, self.ux, self.w, self.focus, self.D, upstream)
        uy, ux = self.uy[:, None, None], self.ux[:, None, None]
        dZ, dpy, dpx = _lfkernel.expand_backward(self.Z, self.uy, self.ux, self.sy, self.sx, self.act,
                                                 uy * dqy + ux * dqx)
        dfocus = -float(np.sum(uy * (dpy + dqy)) + np.sum(ux * (dpx + dqx)))
        return dZ, dfocus

    def signatures(self):
        h, w = self.Z.shape
        uy, ux = self.uy[:, None, None], self.ux[:, None, None]
        Y, X = _grid(h, w)
        qy = Y - uy * self.focus + uy * self.D
        qx = X - ux * self.focus + ux * self.D
        out = []
        for ys, xs in ((self.sy, self.sx), (qy, qx)):
            y0, _, _, iny = _cell(ys, h)
            x0, _, _, inx = _cell(xs, w)
            out.append(np.stack([y0, x0, iny, inx]).astype(np.int64))
        return out


class LightFieldVJP:
    """Forward render plus a closure-style reverse pass, split across view chunks."""

    def __init__(self, I, Z, cfg: LfRenderConfig, threads: int | None = None):
        I = as_image(I, "all-in-focus image")
        Z = as_depth(Z)
        if I.shape[:2] != Z.shape:
            raise ValueError(f"image {I.shape[:2]} and depth {Z.shape} shapes differ")
        u, w = cfg.aperture.views()
        bounds = range(0, len(w), VIEW_CHUNK)
        args = [(I, Z, u[s:s + VIEW_CHUNK], w[s:s + VIEW_CHUNK], float(cfg.focus),
                 cfg.expansion_iters, cfg.d_min, cfg.d_max, cfg.front_search) for s in bounds]
        self.threads = thread_count(threads)
        chunk = _CompiledChunk if cfg.backend == "compiled" else _ViewChunk
        self.chunks = self._map(lambda a: chunk(*a), args)
        out = np.zeros(I.shape)
        for ch in self.chunks:
            out += ch.out
        self.output = out

    def _map(self, fn, items):
        if self.threads == 1 or len(items) == 1:
            return [fn(a) for a in items]
        with ThreadPoolExecutor(self.threads) as pool:
            return list(pool.map(fn, items))

    def __call__(self, upstream):
        upstream = np.asarray(upstream, dtype=np.float64).reshape(self.output.shape)
        parts = self._map(lambda ch: ch.backward(upstream), self.chunks)
        dZ = np.zeros(self.output.shape[:2])
        dfocus = 0.0
        for pz, pf in parts:
            dZ += pz
            dfocus += pf
        return dZ, dfocus

    def signature(self) -> np.ndarray:
        return np.concatenate([s.ravel() for ch in self.chunks for s in ch.signatures()])


def render_light_field(I, Z, cfg: LfRenderConfig, threads: int | None = None) -> np.ndarray:
    if cfg.backend != "compiled":
        return LightFieldVJP(I, Z, cfg, threads).output
    # forward only: same chunks and summation order as LightFieldVJP, without the reverse-pass tape
    I = as_image(I, "all-in-focus image")
    Z = as_depth(Z)
    if I.shape[:2] != Z.shape:
        raise ValueError(f"image {I.shape[:2]} and depth {Z.shape} shapes differ")
    u, w = cfg.aperture.views()
    uy, ux = np.ascontiguousarray(u[:, 0]), np.ascontiguousarray(u[:, 1])

    def chunk(s):
        sl = slice(s, s + VIEW_CHUNK)
        return _lfkernel.render_forward(I, Z, uy[sl], ux[sl], w[sl], float(cfg.focus), cfg.expansion_iters,
                                        cfg.d_min, cfg.d_max, cfg.front_search)

    starts = range(0, len(w), VIEW_CHUNK)
    n = thread_count(threads)
    if n == 1 or len(starts) == 1:
        parts = [chunk(s) for s in starts]
    else:
        with ThreadPoolExecutor(n) as pool:
            parts = list(pool.map(chunk, starts))
    out = np.zeros(I.shape)
    for p in parts:
        out += p
    return out


def render_light_field_grad(I, Z, cfg: LfRenderConfig, upstream, threads: int | None = None):
    """Gradients of sum(upstream * render) with respect to Z and the focus disparity."""
    return LightFieldVJP(I, Z, cfg, threads)(upstream)


# -- lattice light-field operations ---------------------------------------------


def expand_depth(Z, aperture: ApertureMask, K: int = 3, d_min: float = D_MIN, d_max: float = D_MAX,
                 front: bool = True) -> np.ndarray:
    """Per-view depth maps, shape (H, W, m, m); the u=0 view equals Z.

    ``front=False`` gives the plain rule D0 = Z(x), Dk = Z(x + u D(k-1)).
    """
    Z = as_depth(Z)
    if K < 1:
        raise ValueError("K must be >= 1")
    h, w = Z.shape
    m = aperture.m
    u = aperture.coords.reshape(-1, 2)
    Y, X = _grid(h, w)
    uy, ux = u[:, 0, None, None], u[:, 1, None, None]
    exp = _Expansion(Z, uy, ux, np.broadcast_to(Y, (len(u), h, w)), np.broadcast_to(X, (len(u), h, w)),
                     K, d_min, d_max, front)
    return np.moveaxis(exp.D, 0, -1).reshape(h, w, m, m)


def warp_to_views(I, D) -> np.ndarray:
    """Backward-warp I into every view: L(x, u) = I(x + u D(x, u)), shape (H, W, m, m, C)."""
    I = as_image(I)
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 4 or D.shape[:2] != I.shape[:2] or D.shape[2] != D.shape[3]:
        raise ValueError(f"view depth stack {D.shape} does not match image {I.shape}")
    h, w = I.shape[:2]
    m = D.shape[2]
    u = _aperture_coords(m)
    Y, X = _grid(h, w)
    Dv = np.moveaxis(D.reshape(h, w, m * m), -1, 0)
    uy, ux = u[:, 0, None, None], u[:, 1, None, None]
    look = BilinearLookup((h, w), Y + uy * Dv, X + ux * Dv)
    L = look.sample(I)  # (V, H, W, C)
    return np.moveaxis(L, 0, 2).reshape(h, w, m, m, I.shape[2])


def integrate_aperture(L, aperture: ApertureMask, focus: float) -> np.ndarray:
    """Shear each view by -u*focus, weight by the aperture and average."""
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 5 or L.shape[2] != aperture.m or L.shape[3] != aperture.m:
        raise ValueError(f"light field {L.shape} does not match a {aperture.m}x{aperture.m} aperture")
    h, w = L.shape[:2]
    Y, X = _grid(h, w)
    out = np.zeros((h, w, L.shape[4]))
    total = aperture.weight_sum
    for iv in range(aperture.m):
        for iu in range(aperture.m):
            a = aperture.weights[iv, iu]
            if a == 0:
                continue
            uy, ux = aperture.coords[iv, iu]
            look = BilinearLookup((h, w), Y - uy * focus, X - ux * focus)
            out += (a / total) * look.sample(L[:, :, iv, iu, :])
    return out


def _aperture_coords(m: int) -> np.ndarray:
    axis = np.zeros(1) if m == 1 else np.linspace(-1.0, 1.0, m)
    uy, ux = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([uy.ravel(), ux.ravel()], axis=-1)


def _depth_target(Z, u):
    """One-step warped depth Z(x + u Z(x)) for views u, shape (V, H, W), plus its lookup."""
    h, w = Z.shape
    Y, X = _grid(h, w)
    uy, ux = u[:, 0, None, None], u[:, 1, None, None]
    look = BilinearLookup((h, w), Y + uy * Z, X + ux * Z)
    return look.sample(Z), look


def ray_depth_loss(D, Z) -> tuple[float, np.ndarray]:
    """Mean |D(x, u) - Z(x + u Z(x))| over all pixels and views, and its gradient in D."""
    Z = as_depth(Z)
    D = np.asarray(D, dtype=np.float64)
    h, w = Z.shape
    if D.ndim != 4 or D.shape[:2] != (h, w) or D.shape[2] != D.shape[3]:
        raise ValueError(f"view depth stack {D.shape} does not match depth {Z.shape}")
    m = D.shape[2]
    target, _ = _depth_target(Z, _aperture_coords(m))
    diff = D - np.moveaxis(target, 0, -1).reshape(h, w, m, m)
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def ray_depth_loss_depth(Z, aperture: ApertureMask, K: int = 3, d_min: float = D_MIN, d_max: float = D_MAX,
                         front: bool = True, backend: str = "compiled", through_target: bool = True):
    """Ray-depth loss over the aperture views with D = expand_depth(Z).

    Returns (loss, dLoss/dZ). The gradient flows through the expanded
    depths and, when ``through_target`` is set, through the warped target
    as well; otherwise the target is held fixed like a supervision signal.
    """
    Z = as_depth(Z)
    h, w = Z.shape
    u, _ = aperture.views()
    uy, ux = u[:, 0, None, None], u[:, 1, None, None]
    target, look = _depth_target(Z, u)
    if backend == "compiled":
        cy, cx = np.ascontiguousarray(u[:, 0]), np.ascontiguousarray(u[:, 1])
        sy, sx, act, D = _lfkernel.expand_forward(Z, cy, cx, 0.0, K, d_min, d_max, front)
        diff = D - target
        g = np.sign(diff) / diff.size
        dZ, _, _ = _lfkernel.expand_backward(Z, cy, cx, sy, sx, act, g)
    else:
        Y, X = _grid(h, w)
        shape = (len(u), h, w)
        exp = _Expansion(Z, uy, ux, np.broadcast_to(Y, shape), np.broadcast_to(X, shape), K, d_min, d_max, front)
        diff = exp.D - target
        g = np.sign(diff) / diff.size
        dZ, _, _ = exp.backward(g)
    if through_target:
        dZ -= look.adjoint(g)
        ty, tx = look.grad(Z)
        dZ -= np.sum(g * (uy * ty + ux * tx), axis=0)
    return float(np.mean(np.abs(diff))), dZ

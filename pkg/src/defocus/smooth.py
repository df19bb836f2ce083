"""Edge-aware depth smoothing and total-variation regularization.

The smoother solves a full-resolution weighted least-squares problem on the
4-neighbour pixel graph,

    min_z  sum_x conf(x) (z(x) - t(x))^2 + lam * sum_{x~x'} w(x, x') (z(x) - z(x'))^2,

with bilateral affinities w taken from a guide image, by Jacobi-preconditioned
conjugate gradient. The solution is linear in t, so the reverse pass is one
more solve with the same (symmetric) system.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import as_depth, as_image


CONF_FLOOR = 1e-3


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SmoothConfig:
    sigma_xy: float = 8.0
    sigma_c: float = 0.1
    lam: float = 1.0
    cg_iters: int = 200
    cg_tol: float = 1e-6

    def __post_init__(self):
        if min(self.sigma_xy, self.sigma_c, self.cg_iters, self.cg_tol) <= 0 or self.lam < 0:
            raise ValueError(f"invalid smoothing config {self}")


def confidence_from_image(I, floor: float = CONF_FLOOR) -> np.ndarray:
    """Forward-difference gradient magnitude of I, scaled to max 1 and floored."""
    I = as_image(I)
    gx = np.zeros(I.shape)
    gy = np.zeros(I.shape)
    gx[:, :-1] = I[:, 1:] - I[:, :-1]
    gy[:-1] = I[1:] - I[:-1]
    mag = np.sqrt(np.sum(gx**2 + gy**2, axis=-1))
    top = mag.max()
    if top > 0:
        mag = mag / top
    return np.maximum(mag, floor)


def bilateral_affinities(guide, cfg: SmoothConfig) -> tuple[np.ndarray, np.ndarray]:
    """Edge weights to the right neighbour (H, W-1) and the lower neighbour (H-1, W)."""
    guide = as_image(guide)
    spatial = np.exp(-1.0 / (2.0 * cfg.sigma_xy**2))
    dxc = np.sum((guide[:, 1:] - guide[:, :-1]) ** 2, axis=-1)
    dyc = np.sum((guide[1:] - guide[:-1]) ** 2, axis=-1)
    s2 = 2.0 * cfg.sigma_c**2
    return spatial * np.exp(-dxc / s2), spatial * np.exp(-dyc / s2)


class EdgeAwareSolver:
    """Holds the SPD system for one guide/confidence pair; reusable across solves."""

    def __init__(self, guide, conf, cfg: SmoothConfig = SmoothConfig()):
        guide = as_image(guide, "guide")
        conf = as_depth(conf, "confidence")
        if conf.shape != guide.shape[:2]:
            raise ValueError(f"confidence {conf.shape} does not match guide {guide.shape[:2]}")
        if conf.min() <= 0:
            raise ValueError("confidence must be strictly positive")
        self.cfg = cfg
        self.conf = conf
        wx, wy = bilateral_affinities(guide, cfg)
        self.wx = cfg.lam * wx
        self.wy = cfg.lam * wy
        deg = np.zeros(conf.shape)
        deg[:, :-1] += self.wx
        deg[:, 1:] += self.wx
        deg[:-1] += self.wy
        deg[1:] += self.wy
        self.diag = conf + deg
        self.converged = True
        self.iterations = 0

    def matvec(self, z: np.ndarray) -> np.ndarray:
        out = self.diag * z
        out[:, :-1] -= self.wx * z[:, 1:]
        out[:, 1:] -= self.wx * z[:, :-1]
        out[:-1] -= self.wy * z[1:]
        out[1:] -= self.wy * z[:-1]
        return out

    def dense_matrix(self) -> np.ndarray:
        """Explicit system matrix, for small instances and tests."""
        n = self.conf.size
        basis = np.eye(n).reshape(n, *self.conf.shape)
        return np.stack([self.matvec(b).ravel() for b in basis], axis=1)

    def cg(self, rhs: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
        """Preconditioned CG; returns the lowest-residual iterate and warns if it misses tol."""
        x = np.zeros(rhs.shape) if x0 is None else np.array(x0, dtype=np.float64)
        r = rhs - self.matvec(x)
        bnorm = np.linalg.norm(rhs)
        if bnorm == 0:
            self.converged, self.iterations = True, 0
            return np.zeros(rhs.shape)
        goal = self.cfg.cg_tol * bnorm
        best, best_res = x.copy(), np.linalg.norm(r)
        zr = r / self.diag
        p = zr.copy()
        rz = np.vdot(r, zr)
        it = 0
        while best_res > goal and it < self.cfg.cg_iters:
            Ap = self.matvec(p)
            alpha = rz / np.vdot(p, Ap)
            x += alpha * p
            r -= alpha * Ap
            it += 1
            res = np.linalg.norm(r)
            if res < best_res:
                best, best_res = x.copy(), res
            zr = r / self.diag
            rz_new = np.vdot(r, zr)
            p = zr + (rz_new / rz) * p
            rz = rz_new
        self.iterations = it
        self.converged = bool(best_res <= goal)
        if not self.converged:
            warnings.warn(f"CG stopped after {it} iterations at relative residual {best_res / bnorm:.2e}",
                          ConvergenceWarning, stacklevel=3)
        return best

    def solve(self, target, x0=None) -> np.ndarray:
        target = as_depth(target, "target")
        return self.cg(self.conf * target, x0)

    def grad(self, upstream, x0=None) -> np.ndarray:
        """Gradient with respect to the target of sum(upstream * solve(target))."""
        upstream = as_depth(upstream, "upstream")
        return self.conf * self.cg(upstream, x0)


def solve_edge_aware(target, guide, conf, cfg: SmoothConfig = SmoothConfig()) -> np.ndarray:
    return EdgeAwareSolver(guide, conf, cfg).solve(target)


def solve_edge_aware_grad(target, guide, conf, cfg: SmoothConfig, upstream) -> np.ndarray:
    as_depth(target, "target")
    return EdgeAwareSolver(guide, conf, cfg).grad(upstream)


def tv_loss(P) -> tuple[float, np.ndarray]:
    """Anisotropic TV of every plane of an (H, W[, n]) stack with [-1, 1] differences in x and y."""
    P = np.asarray(P, dtype=np.float64)
    dx = P[:, 1:] - P[:, :-1]
    dy = P[1:] - P[:-1]
    loss = float(np.abs(dx).sum() + np.abs(dy).sum())
    g = np.zeros(P.shape)
    sx, sy = np.sign(dx), np.sign(dy)
    g[:, 1:] += sx
    g[:, :-1] -= sx
    g[1:] += sy
    g[:-1] -= sy
    return loss, g

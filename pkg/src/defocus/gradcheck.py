"""Finite-difference checks of the analytic reverse passes.

Every check contracts the renderer output with a fixed random upstream
image, so the scalar being differentiated is sum(upstream * output).

For the light-field renderer the bilinear interpolant is only piecewise
smooth. A central difference is trusted only if no lookup changes cell
(or clamp state) between the +h and -h evaluations; otherwise the step is
shrunk by 10x, up to three times, and components that still straddle a
kink are reported as skipped rather than compared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .comprender import CompositionalVJP, DepthPlanes
from .core import make_aperture
from .lfrender import LfRenderConfig, LightFieldVJP
from .smooth import EdgeAwareSolver, SmoothConfig, confidence_from_image

THRESHOLDS = {"lf": 1e-3, "comp": 1e-4, "smooth": 1e-3}
MAX_SKIPPED = 0.05


@dataclass
class GroupReport:
    name: str
    max_rel_err: float
    checked: int
    skipped: int = 0


@dataclass
class CheckReport:
    model: str
    threshold: float
    groups: list[GroupReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        for g in self.groups:
            total = g.checked + g.skipped
            if g.checked == 0 or g.skipped > MAX_SKIPPED * total or not g.max_rel_err < self.threshold:
                return False
        return True

    def lines(self) -> list[str]:
        out = []
        for g in self.groups:
            out.append(f"{self.model}.{g.name}: max_rel_err={g.max_rel_err:.3e} checked={g.checked} "
                       f"skipped={g.skipped} threshold={self.threshold:.0e}")
        out.append(f"{self.model}: {'PASS' if self.passed else 'FAIL'}")
        return out


def rel_err(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _random_image(rng, size, channels=3):
    img = np.stack([gaussian_filter(rng.random((size, size)), 1.0, mode="wrap") for _ in range(channels)], -1)
    return (img - img.min()) / (img.max() - img.min())


def check_lf(seed: int = 0, size: int = 16, m: int = 5, K: int = 2, h: float = 1e-4,
             corrupt: bool = False) -> CheckReport:
    rng = np.random.default_rng(seed)
    I = _random_image(rng, size)
    # smooth random depth; values sit 0.25 off the integers before smoothing
    Z = gaussian_filter(rng.integers(-3, 4, (size, size)).astype(float) + 0.25, 1.0)
    focus = 0.37
    up = rng.standard_normal(I.shape)

    def evaluate(Zv, fv):
        v = LightFieldVJP(I, Zv, LfRenderConfig(make_aperture(m), fv, K))
        return float(np.sum(up * v.output)), v.signature()

    vjp = LightFieldVJP(I, Z, LfRenderConfig(make_aperture(m), focus, K))
    dZ, dfocus = vjp(up)
    if corrupt:
        dZ = dZ * 1.01
        dfocus *= 1.01

    def central(perturb):
        step = h
        for _ in range(4):
            fp, sp = perturb(step)
            fm, sm = perturb(-step)
            if sp.shape == sm.shape and np.array_equal(sp, sm):
                return (fp - fm) / (2 * step)
            step /= 10
        return None

    report = CheckReport("lf", THRESHOLDS["lf"])
    errs, skipped = [], 0
    for idx in np.ndindex(Z.shape):
        def perturb(s, idx=idx):
            Zp = Z.copy()
            Zp[idx] += s
            return evaluate(Zp, focus)
        num = central(perturb)
        if num is None:
            skipped += 1
            continue
        errs.append(rel_err(dZ[idx], num))
    report.groups.append(GroupReport("depth", max(errs, default=np.inf), len(errs), skipped))
    num = central(lambda s: evaluate(Z, focus + s))
    report.groups.append(GroupReport("focus", np.inf if num is None else rel_err(dfocus, num),
                                     0 if num is None else 1, 1 if num is None else 0))
    return report


def check_comp(seed: int = 0, size: int = 16, h: float = 1e-3, corrupt: bool = False,
               planes: DepthPlanes = DepthPlanes(-6, 6)) -> CheckReport:
    rng = np.random.default_rng(seed)
    I = _random_image(rng, size)
    logits = rng.standard_normal((size, size, planes.n))
    focus = 1.3
    up = rng.standard_normal(I.shape)
    vjp = CompositionalVJP(I, logits, focus, planes)
    blurred = vjp.blurred
    dl, dfocus = vjp(up)
    if corrupt:
        dl = dl * 1.01
        dfocus *= 1.01

    def f(lg, fv):
        return float(np.sum(up * CompositionalVJP(I, lg, fv, planes, blurred=blurred).output))

    errs = []
    for idx in np.ndindex(logits.shape):
        lp, lm = logits.copy(), logits.copy()
        lp[idx] += h
        lm[idx] -= h
        errs.append(rel_err(dl[idx], (f(lp, focus) - f(lm, focus)) / (2 * h)))
    report = CheckReport("comp", THRESHOLDS["comp"])
    report.groups.append(GroupReport("logits", max(errs), len(errs)))
    num = (f(logits, focus + h) - f(logits, focus - h)) / (2 * h)
    report.groups.append(GroupReport("focus", rel_err(dfocus, num), 1))
    return report


def check_smooth(seed: int = 0, size: int = 12, h: float = 1e-4, corrupt: bool = False) -> CheckReport:
    rng = np.random.default_rng(seed)
    I = _random_image(rng, size)
    target = rng.uniform(-5, 5, (size, size))
    cfg = SmoothConfig(cg_tol=1e-13, cg_iters=5000)
    solver = EdgeAwareSolver(I, confidence_from_image(I), cfg)
    up = rng.standard_normal(target.shape)
    g = solver.grad(up)
    if corrupt:
        g = g * 1.01
    errs = []
    for idx in np.ndindex(target.shape):
        tp, tm = target.copy(), target.copy()
        tp[idx] += h
        tm[idx] -= h
        num = (np.sum(up * solver.solve(tp)) - np.sum(up * solver.solve(tm))) / (2 * h)
        errs.append(rel_err(g[idx], num))
    report = CheckReport("smooth", THRESHOLDS["smooth"])
    report.groups.append(GroupReport("target", max(errs), len(errs)))
    return report


CHECKS = {"lf": check_lf, "comp": check_comp, "smooth": check_smooth}

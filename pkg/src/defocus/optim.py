"""Aperture-supervised depth estimation by direct per-pixel optimization.

Both pipelines fit per-pixel depth variables and one focus disparity per
supervision image so that rendering the all-in-focus image reproduces the
shallow depth-of-field targets:

* light field: bounded raw depth -> edge-aware smoothing -> light-field
  render, plus the ray-depth regularizer on the expanded view depths;
* compositional: per-pixel plane logits -> softmax PMF -> compositional
  render, plus total variation of the PMF.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .comprender import CompositionalVJP, DepthPlanes, blur_stack, pmf_to_depth, softmax_backward, softmax_pmf
from .core import ApertureMask, as_image
from .lfrender import LfRenderConfig, LightFieldVJP, ray_depth_loss_depth
from .smooth import EdgeAwareSolver, SmoothConfig, confidence_from_image, tv_loss

log = logging.getLogger(__name__)


class OptimizationError(RuntimeError):
    pass


@dataclass
class Target:
    image: np.ndarray
    aperture: ApertureMask


@dataclass
class SupervisionSet:
    image: np.ndarray
    targets: list[Target]

    def __post_init__(self):
        self.image = as_image(self.image, "all-in-focus image")
        if not self.targets:
            raise ValueError("at least one supervision target is required")
        for i, t in enumerate(self.targets):
            t.image = as_image(t.image, f"target {i}")
            if t.image.shape != self.image.shape:
                raise ValueError(f"target {i} shape {t.image.shape} differs from {self.image.shape}")


SCHEDULES = ("constant", "cosine")
FOCUS_ORDERS = ("none", "ascending", "descending")
GAUGES = ("none", "mean_focus")


def lr_factor(schedule: str, step: int, steps: int) -> float:
    """Learning-rate multiplier; cosine decays from 1 towards 0 over the run."""
    if schedule == "constant" or steps <= 0:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * step / steps))


@dataclass
class OptimConfig:
    steps: int = 1000
    lr_depth: float = 3e-2
    lr_logits: float = 1e-1
    lr_focus: float = 1e-1
    lambda_d: float = 0.1
    lambda_tv: float = 1e-10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    d_lo: float = -15.0
    d_hi: float = 15.0
    expansion_iters: int = 3
    smooth_in_loop: bool = True
    smooth: SmoothConfig = field(default_factory=SmoothConfig)
    planes: DepthPlanes = field(default_factory=DepthPlanes)
    init_focus: float = 0.0
    schedule: str = "cosine"
    mirror_check: float = 0.25
    mirror_trial: float = 0.25
    focus_order: str = "none"
    gauge: str = "mean_focus"
    threads: int | None = None

    def __post_init__(self):
        if self.steps < 0 or min(self.lr_depth, self.lr_logits, self.lr_focus) <= 0:
            raise ValueError("steps must be >= 0 and learning rates positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.gauge not in GAUGES:
            raise ValueError(f"gauge must be one of {GAUGES}")
        if self.focus_order not in FOCUS_ORDERS:
            raise ValueError(f"focus_order must be one of {FOCUS_ORDERS}")
        if not (0.0 <= self.mirror_check <= 1.0 and 0.0 < self.mirror_trial <= 1.0):
            raise ValueError("mirror_check and mirror_trial must be fractions of the run")
        if not self.d_lo < self.d_hi:
            raise ValueError("depth bounds must satisfy d_lo < d_hi")
        if self.lambda_d < 0 or self.lambda_tv < 0:
            raise ValueError("regularizer weights must be non-negative")


# -- Adam ------------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, params) -> "AdamState":
        p = np.asarray(params, dtype=np.float64)
        return cls(np.zeros(p.shape), np.zeros(p.shape))


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new params and a new state."""
    g = np.asarray(grads, dtype=np.float64)
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    new = np.asarray(params, dtype=np.float64) - lr * mhat / (np.sqrt(vhat) + eps)
    return new, AdamState(m, v, t)


# -- losses -----------------------------------------------------------------------------


def l1_image_loss(A, B) -> tuple[float, np.ndarray]:
    """Mean absolute error and its (sign) gradient in A."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    diff = A - B
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


# -- results -----------------------------------------------------------------------------


@dataclass
class TraceRow:
    step: int
    total: float
    data: float
    reg: float
    focus: list[float]


@dataclass
class OptimResult:
    depth: np.ndarray
    focus: np.ndarray
    trace: list[TraceRow]
    logits: np.ndarray | None = None
    raw_depth: np.ndarray | None = None
    confidence: np.ndarray | None = None
    smoothing_converged: bool | None = None
    mirrored: bool = False

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.total for r in self.trace])

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["step", "total", "data", "reg"] + [f"focus_{i}" for i in range(len(self.focus))])
            for r in self.trace:
                wr.writerow([r.step, repr(r.total), repr(r.data), repr(r.reg)] + [repr(v) for v in r.focus])


def _ordered(focus, order: str) -> bool:
    steps = np.diff(focus)
    if order == "ascending":
        return bool(np.all(steps >= 0))
    if order == "descending":
        return bool(np.all(steps <= 0))
    return True


def mirror_step(cfg: OptimConfig) -> int | None:
    """Step at which the mirror check runs, or None when disabled."""
    if cfg.mirror_check <= 0 or cfg.steps == 0:
        return None
    return min(cfg.steps - 1, max(1, round(cfg.mirror_check * cfg.steps)))


@dataclass
class _Branch:
    """Parameters, Adam states and trace of one descent path."""

    params: list
    states: list
    trace: list
    mirrored: bool = False
    view: object = None

    def mirror(self, maps) -> "_Branch":
        params, states = [], []
        for x, st, (fx, fm) in zip(self.params, self.states, maps):
            params.append(fx(x))
            states.append(AdamState(fm(st.m), fm(st.v) if fm is _reverse else st.v, st.t))
        return _Branch(params, states, list(self.trace), not self.mirrored)


def _reverse(x):
    return np.ascontiguousarray(x[..., ::-1])


def _descend(branch: _Branch, evaluate, lrs, project, cfg: OptimConfig, start: int, stop: int, callback,
             final: bool) -> None:
    """Adam steps start..stop-1, then (if ``final``) one last evaluation at ``stop``."""
    for step in range(start, stop + 1):
        if step == stop and not final:
            return
        total, data, reg, grads, branch.view = evaluate(branch.params)
        _check_finite(total, step)
        focus = branch.params[-1]
        branch.trace.append(TraceRow(step, total, data, reg, focus.tolist()))
        if callback:
            callback(step, branch.view, focus, total)
        if step == stop:
            return
        k = lr_factor(cfg.schedule, step, cfg.steps)
        for i, (g, lr) in enumerate(zip(grads, lrs)):
            if lr:
                branch.params[i], branch.states[i] = adam_step(branch.params[i], g, branch.states[i], k * lr,
                                                               cfg.beta1, cfg.beta2, cfg.eps)
        project(branch.params)


def _run(params, evaluate, lrs, project, maps, cfg: OptimConfig, callback, exact_mirror: bool,
         reset=None) -> _Branch:
    """Optimize, resolving the global depth mirror at the check step.

    A known focus order picks the branch directly. Otherwise, unless the
    mirror is an exact symmetry of the loss, both branches descend for a
    trial window and the one with the lower loss continues.
    """
    first = _Branch(list(params), [AdamState.like(p) for p in params], [])
    check = mirror_step(cfg) if maps is not None else None
    if check is None:
        _descend(first, evaluate, lrs, project, cfg, 0, cfg.steps, callback, True)
        return first
    _descend(first, evaluate, lrs, project, cfg, 0, check, callback, False)
    other = first.mirror(maps)
    project(other.params)
    if cfg.focus_order != "none":
        if not _ordered(first.params[-1], cfg.focus_order) and _ordered(other.params[-1], cfg.focus_order):
            log.info("step %d: focus order selects the mirrored depth", check)
            first = other
    elif not exact_mirror:
        trial_end = min(cfg.steps, check + max(1, round(cfg.mirror_trial * cfg.steps)))
        for b in (first, other):
            if reset:
                reset()
            _descend(b, evaluate, lrs, project, cfg, check, trial_end, callback, False)
        losses = [b.trace[-1].total for b in (first, other)]
        log.info("mirror trial at step %d: loss %.5g, mirrored %.5g", trial_end, *losses)
        first = other if losses[1] < losses[0] else first
        check = trial_end
    if reset:
        reset()
    _descend(first, evaluate, lrs, project, cfg, check, cfg.steps, callback, True)
    return first


def _gauge_anchor(cfg: OptimConfig, focus, fixed_depth: bool) -> float | None:
    """Mean focus to hold fixed, or None.

    Shifting every depth and every focus by the same amount leaves the
    renders unchanged, so only depth relative to focus is observable. The
    mean focus pins this free offset at its initial value.
    """
    if cfg.gauge == "none" or fixed_depth:
        return None
    return float(np.mean(focus))


def _fix_gauge(focus, anchor):
    return focus if anchor is None else focus + (anchor - focus.mean())


def _check_finite(loss: float, step: int) -> None:
    if not math.isfinite(loss):
        raise OptimizationError(f"non-finite loss {loss} at step {step}")


def bounded_depth(theta, lo: float, hi: float) -> np.ndarray:
    return lo + (hi - lo) * (np.tanh(theta) + 1.0) / 2.0


def _bounded_depth_grad(theta, lo: float, hi: float) -> np.ndarray:
    return (hi - lo) / 2.0 * (1.0 - np.tanh(theta) ** 2)


def _raw_for_depth(z, lo, hi):
    return np.arctanh(np.clip(2.0 * (np.asarray(z, float) - lo) / (hi - lo) - 1.0, -1 + 1e-9, 1 - 1e-9))


# -- light-field pipeline -------------------------------------------------------------------


def view_spacing(aperture) -> float:
    """Distance in u between adjacent views (1 for a pinhole)."""
    return 1.0 if aperture.m == 1 else 2.0 / (aperture.m - 1)


class LightFieldObjective:
    """Sum over targets of L1 render error plus lambda_d times the ray-depth loss.

    Evaluated on the smoothed depth; ``__call__`` maps raw variables to
    (total, data, reg, dtheta, dfocus, depth).
    """

    def __init__(self, sup: SupervisionSet, cfg: OptimConfig):
        self.sup, self.cfg = sup, cfg
        self.confidence = confidence_from_image(sup.image)
        self.solver = EdgeAwareSolver(sup.image, self.confidence, cfg.smooth) if cfg.smooth_in_loop else None
        self.reset_warm_start()

    def reset_warm_start(self):
        self._warm_fwd = None
        self._warm_bwd = None

    def depth(self, theta) -> np.ndarray:
        cfg = self.cfg
        z = bounded_depth(theta, cfg.d_lo, cfg.d_hi)
        if self.solver is not None:
            z = self.solver.solve(z, self._warm_fwd)
            self._warm_fwd = z
            self.depth_converged = self.solver.converged
        return np.clip(z, cfg.d_lo, cfg.d_hi)

    def data_and_reg(self, Z, focus):
        """Loss terms and gradients with respect to the smoothed depth and the focus values."""
        cfg = self.cfg
        data = reg = 0.0
        dZ = np.zeros(Z.shape)
        dfocus = np.zeros(len(focus))
        for i, t in enumerate(self.sup.targets):
            rc = LfRenderConfig(t.aperture, float(np.clip(focus[i], cfg.d_lo, cfg.d_hi)), cfg.expansion_iters,
                                cfg.d_lo, cfg.d_hi)
            vjp = LightFieldVJP(self.sup.image, Z, rc, cfg.threads)
            loss, g = l1_image_loss(vjp.output, t.image)
            gz, gf = vjp(g)
            data += loss
            dZ += gz
            dfocus[i] = gf
            if cfg.lambda_d:
                ld, gd = ray_depth_loss_depth(Z, t.aperture, cfg.expansion_iters, cfg.d_lo, cfg.d_hi)
                # lambda_d weighs the ray-depth error in pixels between adjacent views
                scale = cfg.lambda_d * view_spacing(t.aperture)
                reg += scale * ld
                dZ += scale * gd
        return data, reg, dZ, dfocus

    def __call__(self, theta, focus):
        cfg = self.cfg
        Z = self.depth(theta)
        data, reg, dZ, dfocus = self.data_and_reg(Z, focus)
        if not math.isfinite(data + reg):
            raise OptimizationError(f"non-finite loss {data + reg}")
        inside = (Z > cfg.d_lo) & (Z < cfg.d_hi)
        dZ = dZ * inside
        if self.solver is not None:
            dZ = self.solver.grad(dZ, self._warm_bwd)
            self._warm_bwd = dZ / self.confidence
        dtheta = dZ * _bounded_depth_grad(theta, cfg.d_lo, cfg.d_hi)
        return data + reg, data, reg, dtheta, dfocus, Z


def optimize_depth_lf(sup: SupervisionSet, cfg: OptimConfig = OptimConfig(), init_depth=None,
                      init_focus=None, fix_depth: bool = False, callback=None) -> OptimResult:
    """Minimize the light-field objective over raw depths and per-target focus disparities.

    ``fix_depth`` freezes the depth variables (focus-only fit).
    """
    h, w = sup.image.shape[:2]
    obj = LightFieldObjective(sup, cfg)
    theta = _raw_for_depth(np.zeros((h, w)) if init_depth is None else init_depth, cfg.d_lo, cfg.d_hi)
    focus = np.full(len(sup.targets), cfg.init_focus) if init_focus is None else np.array(init_focus, float)

    def evaluate(params):
        total, data, reg, dtheta, dfocus, Z = obj(*params)
        return total, data, reg, [dtheta, dfocus], Z

    anchor = _gauge_anchor(cfg, focus, fix_depth)

    def project(params):
        params[1] = np.clip(_fix_gauge(params[1], anchor), cfg.d_lo, cfg.d_hi)

    # z -> d_lo + d_hi - z is theta -> -theta and keeps every blur radius |z - focus|
    c = cfg.d_lo + cfg.d_hi
    maps = None if fix_depth else [(np.negative, np.negative), (lambda f: c - f, np.negative)]
    lrs = [0.0 if fix_depth else cfg.lr_depth, cfg.lr_focus]
    best = _run([theta, focus], evaluate, lrs, project, maps, cfg, callback, False, obj.reset_warm_start)
    theta, focus = best.params
    if cfg.smooth_in_loop:
        # the winning branch always finishes last, so this is its final forward solve
        Z = best.view
        converged = obj.depth_converged
    else:
        z = bounded_depth(theta, cfg.d_lo, cfg.d_hi)
        solver = EdgeAwareSolver(sup.image, obj.confidence, cfg.smooth)
        Z = np.clip(solver.solve(z), cfg.d_lo, cfg.d_hi)
        converged = solver.converged
    log.info("lf optimization: loss %.5g -> %.5g", best.trace[0].total, best.trace[-1].total)
    return OptimResult(Z, focus, best.trace, raw_depth=bounded_depth(theta, cfg.d_lo, cfg.d_hi),
                       confidence=obj.confidence, smoothing_converged=converged, mirrored=best.mirrored)


# -- compositional pipeline -------------------------------------------------------------------


class CompositionalObjective:
    """Sum over targets of L1 render error plus lambda_tv times the PMF total variation."""

    def __init__(self, sup: SupervisionSet, cfg: OptimConfig):
        self.sup, self.cfg = sup, cfg
        self.blurred = blur_stack(sup.image, cfg.planes, cfg.threads)

    def __call__(self, logits, focus):
        cfg = self.cfg
        span = cfg.planes.d_max - cfg.planes.d_min
        data = reg = 0.0
        dP = np.zeros(logits.shape)
        dfocus = np.zeros(len(focus))
        P = softmax_pmf(logits)
        for i, t in enumerate(self.sup.targets):
            vjp = CompositionalVJP(self.sup.image, logits, float(np.clip(focus[i], -span, span)), cfg.planes,
                                   blurred=self.blurred)
            loss, g = l1_image_loss(vjp.output, t.image)
            gP, dfocus[i] = vjp.pmf_grad(g)
            dP += gP
            data += loss
            if cfg.lambda_tv:
                # the data term is a per-element mean, so the summed TV is divided by the same count
                tv, gtv = tv_loss(P)
                scale = cfg.lambda_tv / t.image.size
                reg += scale * tv
                dP += scale * gtv
        return data + reg, data, reg, softmax_backward(P, dP), dfocus


def optimize_depth_comp(sup: SupervisionSet, cfg: OptimConfig = OptimConfig(), init_logits=None,
                        init_focus=None, callback=None) -> OptimResult:
    h, w = sup.image.shape[:2]
    obj = CompositionalObjective(sup, cfg)
    logits = np.zeros((h, w, cfg.planes.n)) if init_logits is None else np.array(init_logits, float)
    focus = np.full(len(sup.targets), cfg.init_focus) if init_focus is None else np.array(init_focus, float)
    span = cfg.planes.d_max - cfg.planes.d_min

    def evaluate(params):
        total, data, reg, dlogits, dfocus = obj(*params)
        return total, data, reg, [dlogits, dfocus], params[0]

    anchor = _gauge_anchor(cfg, focus, False)

    def project(params):
        params[1] = np.clip(_fix_gauge(params[1], anchor), -span, span)

    # reversing the plane axis maps plane d to d_min + d_max - d; the loss is exactly symmetric
    c = cfg.planes.d_min + cfg.planes.d_max
    maps = [(_reverse, _reverse), (lambda f: c - f, np.negative)]
    best = _run([logits, focus], evaluate, [cfg.lr_logits, cfg.lr_focus], project, maps, cfg, callback, True)
    logits, focus = best.params
    log.info("comp optimization: loss %.5g -> %.5g", best.trace[0].total, best.trace[-1].total)
    P = softmax_pmf(logits)
    return OptimResult(pmf_to_depth(P, cfg.planes), focus, best.trace, logits=logits,
                       confidence=confidence_from_image(sup.image), mirrored=best.mirrored)

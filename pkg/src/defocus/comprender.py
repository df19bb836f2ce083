"""Compositional aperture rendering: a per-pixel depth PMF blends disk-blurred copies of the image.

The PMF over absolute disparity planes is shifted by the focus disparity so
that plane ``focus`` lands on the delta kernel; relative plane d then
selects the normalized disk of radius |d|. Blurs use edge-replicated
padding and are computed by FFT so the cost per plane does not depend on
the kernel radius.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import D_MAX, D_MIN, as_image, thread_count


@dataclass(frozen=True)
class DepthPlanes:
    d_min: float = D_MIN
    d_max: float = D_MAX

    def __post_init__(self):
        if self.d_min != int(self.d_min) or self.d_max != int(self.d_max):
            raise ValueError("plane range must have integer bounds")
        if not self.d_min <= 0 <= self.d_max:
            raise ValueError("plane range must contain 0")

    @property
    def disparities(self) -> np.ndarray:
        return np.arange(self.d_min, self.d_max + 1, dtype=np.float64)

    @property
    def n(self) -> int:
        return int(self.d_max - self.d_min) + 1

    def index(self, d: float) -> int:
        return int(round(d - self.d_min))


def disk_kernel(d: float) -> np.ndarray:
    """Normalized indicator of x1^2 + x2^2 <= d^2 on integer offsets, size (2*ceil|d|+1)^2."""
    r = int(math.ceil(abs(d)))
    off = np.arange(-r, r + 1)
    yy, xx = np.meshgrid(off, off, indexing="ij")
    k = (yy**2 + xx**2 <= d * d).astype(np.float64)
    return k / k.sum()


def kernel_stack(planes: DepthPlanes) -> list[np.ndarray]:
    return [disk_kernel(d) for d in planes.disparities]


def _fft_blur(I: np.ndarray, radii, threads: int = 1) -> dict[float, np.ndarray]:
    h, w, c = I.shape
    R = int(math.ceil(max(radii)))
    if R == 0:
        return {0.0: I.copy()}
    padded = np.pad(I, ((R, R), (R, R), (0, 0)), mode="edge")
    ph, pw = padded.shape[:2]
    freq = np.fft.rfft2(padded, axes=(0, 1))

    def one(d):
        if d == 0:
            return d, I.copy()
        k = disk_kernel(d)
        r = k.shape[0] // 2
        buf = np.zeros((ph, pw))
        buf[:2 * r + 1, :2 * r + 1] = k
        buf = np.roll(buf, (-r, -r), axis=(0, 1))
        kf = np.fft.rfft2(buf)
        out = np.fft.irfft2(freq * kf[:, :, None], s=(ph, pw), axes=(0, 1))
        return d, out[R:R + h, R:R + w]

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return dict(pool.map(one, radii))
    return dict(one(d) for d in radii)


def blur_stack(I, planes: DepthPlanes = DepthPlanes(), threads: int | None = None) -> np.ndarray:
    """Image blurred by every plane's disk kernel, shape (n, H, W, C).

    Planes +d and -d share one blurred copy since their kernels coincide.
    """
    I = as_image(I)
    ds = planes.disparities
    radii = sorted({abs(float(d)) for d in ds})
    blurred = _fft_blur(I, radii, thread_count(threads))
    return np.stack([blurred[abs(float(d))] for d in ds])


def blur_direct(I, d: float) -> np.ndarray:
    """Edge-padded spatial-domain disk blur; slow reference path."""
    I = as_image(I)
    k = disk_kernel(d)
    r = k.shape[0] // 2
    h, w = I.shape[:2]
    padded = np.pad(I, ((r, r), (r, r), (0, 0)), mode="edge")
    out = np.zeros(I.shape)
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            if k[dy, dx]:
                out += k[dy, dx] * padded[dy:dy + h, dx:dx + w]
    return out


def softmax_pmf(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(P: np.ndarray, dP: np.ndarray) -> np.ndarray:
    return P * (dP - np.sum(P * dP, axis=-1, keepdims=True))


def _shift_index(n: int, s: int) -> np.ndarray:
    """Relative-plane index receiving each absolute plane under an integer shift s."""
    return np.clip(np.arange(n) - s, 0, n - 1)


def _shift_int(P: np.ndarray, s: int) -> np.ndarray:
    n = P.shape[-1]
    if n == 1:
        return P.copy()
    out = np.zeros(P.shape)
    lo_end = min(max(s + 1, 0), n)
    hi_start = min(max(n - 1 + s, 0), n)
    if lo_end < hi_start:
        out[..., lo_end - s:hi_start - s] = P[..., lo_end:hi_start]
    out[..., 0] += P[..., :lo_end].sum(axis=-1)
    out[..., n - 1] += P[..., hi_start:].sum(axis=-1)
    return out


def _check_shift(focus: float, planes: DepthPlanes) -> None:
    if abs(focus) > planes.d_max - planes.d_min:
        raise ValueError(f"focus shift {focus} exceeds the plane range")


def shift_pmf(P, focus: float, planes: DepthPlanes = DepthPlanes()) -> np.ndarray:
    """Re-index a PMF over absolute planes to planes relative to the focus disparity.

    Relative plane d receives the mass of absolute plane d + focus; mass
    pushed past either end piles onto the end plane. Fractional shifts blend
    the two neighbouring integer shifts linearly.
    """
    P = np.asarray(P, dtype=np.float64)
    _check_shift(focus, planes)
    lo = math.floor(focus)
    t = focus - lo
    out = _shift_int(P, lo)
    if t:
        out = (1.0 - t) * out + t * _shift_int(P, lo + 1)
    return out


def _shift_backward(dS: np.ndarray, focus: float) -> np.ndarray:
    n = dS.shape[-1]
    lo = math.floor(focus)
    t = focus - lo
    dP = dS[..., _shift_index(n, lo)]
    if t:
        dP = (1.0 - t) * dP + t * dS[..., _shift_index(n, lo + 1)]
    return dP


class CompositionalVJP:
    """Forward compositional render and its reverse pass.

    ``blurred`` may be supplied to reuse a precomputed ``blur_stack``.
    """

    def __init__(self, I, logits, focus: float, planes: DepthPlanes = DepthPlanes(),
                 blurred: np.ndarray | None = None, threads: int | None = None):
        I = as_image(I, "all-in-focus image")
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape != I.shape[:2] + (planes.n,):
            raise ValueError(f"logits {logits.shape} do not match image {I.shape[:2]} with {planes.n} planes")
        _check_shift(focus, planes)
        self.focus = float(focus)
        self.planes = planes
        self.blurred = blur_stack(I, planes, threads) if blurred is None else blurred
        self.P = softmax_pmf(logits)
        self.shifted = shift_pmf(self.P, self.focus, planes)
        self.output = np.einsum("hwn,nhwc->hwc", self.shifted, self.blurred)

    def __call__(self, upstream):
        """Gradients of sum(upstream * render) with respect to the logits and focus."""
        dP, dfocus = self.pmf_grad(upstream)
        return softmax_backward(self.P, dP), dfocus

    def pmf_grad(self, upstream):
        """Gradients with respect to the (post-softmax) PMF and the focus."""
        upstream = np.asarray(upstream, dtype=np.float64).reshape(self.output.shape)
        dS = np.einsum("hwc,nhwc->hwn", upstream, self.blurred)
        # right derivative in focus at integer values
        lo = math.floor(self.focus)
        diff = _shift_int(self.P, lo + 1) - _shift_int(self.P, lo)
        return _shift_backward(dS, self.focus), float(np.sum(dS * diff))


def render_compositional(I, logits, focus: float, planes: DepthPlanes = DepthPlanes(),
                         blurred: np.ndarray | None = None, threads: int | None = None) -> np.ndarray:
    return CompositionalVJP(I, logits, focus, planes, blurred, threads).output


def render_pmf(I, P, focus: float, planes: DepthPlanes = DepthPlanes(), blurred: np.ndarray | None = None,
               threads: int | None = None) -> np.ndarray:
    """Compositional render from a PMF directly (no softmax)."""
    I = as_image(I, "all-in-focus image")
    P = np.asarray(P, dtype=np.float64)
    if P.shape != I.shape[:2] + (planes.n,):
        raise ValueError(f"PMF {P.shape} does not match image {I.shape[:2]} with {planes.n} planes")
    blurred = blur_stack(I, planes, threads) if blurred is None else blurred
    return np.einsum("hwn,nhwc->hwc", shift_pmf(P, focus, planes), blurred)


def render_compositional_grad(I, logits, focus: float, upstream, planes: DepthPlanes = DepthPlanes(),
                              threads: int | None = None):
    return CompositionalVJP(I, logits, focus, planes, threads=threads)(upstream)


def pmf_to_depth(P, planes: DepthPlanes = DepthPlanes()) -> np.ndarray:
    """Per-pixel mode disparity; ties go to the plane nearest 0 (then the lower one)."""
    P = np.asarray(P, dtype=np.float64)
    d = planes.disparities
    is_max = P == P.max(axis=-1, keepdims=True)
    score = np.where(is_max, -np.abs(d), -np.inf)
    return d[np.argmax(score, axis=-1)]


def one_hot_logits(depth, planes: DepthPlanes = DepthPlanes(), scale: float = 100.0) -> np.ndarray:
    """Logits whose softmax is (numerically) one-hot at the plane nearest each depth."""
    depth = np.asarray(depth, dtype=np.float64)
    idx = np.clip(np.round(depth - planes.d_min).astype(int), 0, planes.n - 1)
    logits = np.zeros(depth.shape + (planes.n,))
    np.put_along_axis(logits, idx[..., None], scale, axis=-1)
    return logits


def reflect_pmf(P, focus: int, planes: DepthPlanes = DepthPlanes()) -> np.ndarray:
    """Mirror a PMF about an integer focal plane: plane d takes the mass of plane 2*focus - d."""
    P = np.asarray(P, dtype=np.float64)
    d = planes.disparities
    src = np.array([planes.index(2 * focus - v) for v in d])
    if src.min() < 0 or src.max() >= planes.n:
        keep = (src >= 0) & (src < planes.n)
        out = np.zeros(P.shape)
        out[..., keep] = P[..., src[keep]]
        return out
    return P[..., src]

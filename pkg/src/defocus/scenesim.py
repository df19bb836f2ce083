"""Layered fronto-parallel scenes and their brute-force light fields.

A scene is an ordered front-to-back list of layers, each a texture, a
binary alpha mask and a disparity. The ray through image position x and
aperture position u meets a layer of disparity z at texture position
x + u z, matching the warp used by the light-field renderer. The first
layer whose (nearest-neighbour) alpha is set at that position is what the
ray sees.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import D_MAX, D_MIN, ApertureMask, BilinearLookup, as_image
from .io import read_pfm, read_png, write_pfm, write_png

SCENE_KINDS = ("single_plane", "two_plane", "occluder", "textured_random")


@dataclass
class Layer:
    texture: np.ndarray
    alpha: np.ndarray
    disparity: float


@dataclass
class SceneSpec:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("scene needs at least one layer")
        shape = self.layers[0].texture.shape
        for i, layer in enumerate(self.layers):
            layer.texture = as_image(layer.texture, f"layer {i} texture")
            layer.alpha = np.asarray(layer.alpha).astype(bool)
            if layer.texture.shape != shape or layer.alpha.shape != shape[:2]:
                raise ValueError(f"layer {i} shape differs from layer 0")
            if not D_MIN <= layer.disparity <= D_MAX:
                raise ValueError(f"layer {i} disparity {layer.disparity} outside [{D_MIN}, {D_MAX}]")
        if not self.layers[-1].alpha.all():
            raise ValueError("last layer must be fully opaque")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.layers[0].texture.shape


def _trace(scene: SceneSpec, py: np.ndarray, px: np.ndarray, u) -> tuple[np.ndarray, np.ndarray]:
    """Colour and depth seen by rays leaving continuous positions (py, px) towards aperture point u."""
    h, w, c = scene.shape
    color = np.zeros(py.shape + (c,))
    depth = np.zeros(py.shape)
    todo = np.ones(py.shape, dtype=bool)
    for layer in scene.layers:
        ly = py + u[0] * layer.disparity
        lx = px + u[1] * layer.disparity
        iy = np.clip(np.floor(ly + 0.5).astype(np.intp), 0, h - 1)
        ix = np.clip(np.floor(lx + 0.5).astype(np.intp), 0, w - 1)
        hit = todo & layer.alpha[iy, ix]
        if hit.any():
            look = BilinearLookup((h, w), ly[hit], lx[hit])
            color[hit] = look.sample(layer.texture)
            depth[hit] = layer.disparity
            todo &= ~hit
    return color, depth


def _pixel_grid(scene: SceneSpec):
    h, w = scene.shape[:2]
    return np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")


def oracle_view(scene: SceneSpec, u) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole view from aperture position u and its z-buffer depth."""
    Y, X = _pixel_grid(scene)
    return _trace(scene, Y, X, np.asarray(u, dtype=np.float64))


def oracle_lightfield(scene: SceneSpec, aperture: ApertureMask) -> np.ndarray:
    """All m x m views, shape (H, W, m, m, C)."""
    m = aperture.m
    h, w, c = scene.shape
    L = np.zeros((h, w, m, m, c))
    for iv in range(m):
        for iu in range(m):
            L[:, :, iv, iu] = oracle_view(scene, aperture.coords[iv, iu])[0]
    return L


def oracle_view_depths(scene: SceneSpec, aperture: ApertureMask) -> np.ndarray:
    m = aperture.m
    h, w = scene.shape[:2]
    D = np.zeros((h, w, m, m))
    for iv in range(m):
        for iu in range(m):
            D[:, :, iv, iu] = oracle_view(scene, aperture.coords[iv, iu])[1]
    return D


def oracle_sdof(scene: SceneSpec, aperture: ApertureMask, focus: float) -> np.ndarray:
    """Aperture-averaged image focused at disparity ``focus``.

    Each ray is traced from its sheared position x - u*focus, so no view is
    resampled.
    """
    Y, X = _pixel_grid(scene)
    u, w = aperture.views()
    out = np.zeros(scene.shape)
    for uv, wt in zip(u, w):
        color, _ = _trace(scene, Y - uv[0] * focus, X - uv[1] * focus, uv)
        out += wt * color
    return out


def central_view(scene: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    return oracle_view(scene, (0.0, 0.0))


# -- procedural scenes -------------------------------------------------------------


def noise_texture(rng: np.random.Generator, size: int, channels: int = 3, sigma: float = 1.5) -> np.ndarray:
    """Band-limited noise: Gaussian-filtered white noise stretched to [0.05, 0.95] per channel."""
    tex = np.empty((size, size, channels))
    for c in range(channels):
        n = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
        n = (n - n.min()) / (n.max() - n.min())
        tex[:, :, c] = 0.05 + 0.9 * n
    return tex


def checker_texture(size: int, period: int, colors=((0.2, 0.3, 0.8), (0.9, 0.6, 0.1))) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    check = ((yy // period + xx // period) % 2).astype(bool)
    a, b = np.asarray(colors[0], float), np.asarray(colors[1], float)
    return np.where(check[:, :, None], b, a)


def make_test_scene(kind: str, seed: int = 0, size: int = 64, disparities=None, flat_region: bool = False) -> SceneSpec:
    """Deterministic procedural scene.

    ``disparities`` overrides the per-kind defaults (front layer first).
    ``flat_region`` paints an untextured square into the back layer.
    """
    if kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    rng = np.random.default_rng(seed)
    full = np.ones((size, size), dtype=bool)
    if kind == "single_plane":
        zs = disparities or (2.0,)
        layers = [Layer(noise_texture(rng, size), full, float(zs[0]))]
    elif kind == "two_plane":
        zs = disparities or (4.0, -4.0)
        front = np.zeros((size, size), dtype=bool)
        q = size // 4
        front[q:size - q, q:size - q] = True
        layers = [Layer(noise_texture(rng, size, sigma=1.2), front, float(zs[0])),
                  Layer(noise_texture(rng, size, sigma=1.5), full, float(zs[1]))]
    elif kind == "occluder":
        zs = disparities or (6.0, 0.0)
        front = np.zeros((size, size), dtype=bool)
        front[:, size // 2 - size // 8:size // 2 + size // 8] = True
        layers = [Layer(checker_texture(size, max(2, size // 16)), front, float(zs[0])),
                  Layer(checker_texture(size, max(2, size // 16), ((0.1, 0.7, 0.2), (0.8, 0.1, 0.1))), full,
                        float(zs[1]))]
    else:
        zs = disparities or (float(rng.integers(1, 6)), float(-rng.integers(1, 6)))
        front = gaussian_filter(rng.standard_normal((size, size)), size / 8, mode="wrap") > 0
        layers = [Layer(noise_texture(rng, size, sigma=1.0), front, float(zs[0])),
                  Layer(noise_texture(rng, size, sigma=1.0), full, float(zs[1]))]
    if flat_region:
        back = layers[-1].texture
        q = size // 4
        back[:q + q // 2, :q + q // 2] = 0.5
    return SceneSpec(layers)


# -- manifest -------------------------------------------------------------------------


def scene_manifest_lines(scene: SceneSpec, out_dir) -> list[str]:
    """Write layer assets (texture PFM, alpha PNG) and return their manifest lines."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, layer in enumerate(scene.layers):
        tex, alp = f"layer{i}_texture.pfm", f"layer{i}_alpha.png"
        write_pfm(out / tex, layer.texture)
        write_png(out / alp, layer.alpha.astype(float))
        lines.append(f"layer {i} {tex} {alp} {layer.disparity:.17g}")
    return lines


def save_scene(scene: SceneSpec, out_dir, name: str = "scene.txt") -> Path:
    out = Path(out_dir)
    lines = ["# layer index texture alpha disparity, front to back"] + scene_manifest_lines(scene, out)
    path = out / name
    path.write_text("\n".join(lines) + "\n")
    return path


def load_scene(manifest) -> SceneSpec:
    """Read the ``layer`` lines of a manifest; other lines are ignored."""
    manifest = Path(manifest)
    layers = []
    for line in manifest.read_text().splitlines():
        parts = line.split()
        if len(parts) != 5 or parts[0] != "layer":
            continue
        _, _, tex, alp, z = parts
        texture = read_pfm(manifest.parent / tex)
        alpha = read_png(manifest.parent / alp)[:, :, 0] > 0.5
        layers.append(Layer(texture, alpha, float(z)))
    return SceneSpec(layers)

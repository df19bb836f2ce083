import numpy as np
import pytest
from scipy.ndimage import gaussian_filter


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_image(rng, h, w, channels=3, sigma=1.0):
    img = np.stack([gaussian_filter(rng.random((h, w)), sigma, mode="wrap") for _ in range(channels)], -1)
    return (img - img.min()) / (img.max() - img.min())


def disk_convolve(img, r):
    """Brute-force clamp-to-edge convolution with the normalized integer-offset disk of radius r."""
    h, w, c = img.shape
    R = int(np.ceil(abs(r)))
    offs = [(dy, dx) for dy in range(-R, R + 1) for dx in range(-R, R + 1) if dy * dy + dx * dx <= r * r]
    out = np.zeros_like(img)
    ys, xs = np.arange(h), np.arange(w)
    for dy, dx in offs:
        out += img[np.clip(ys + dy, 0, h - 1)][:, np.clip(xs + dx, 0, w - 1)]
    return out / len(offs)

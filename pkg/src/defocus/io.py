"""PNG and PFM readers/writers.

PNG values map linearly to [0, 1] as byte/255. PFM files are written
little-endian (scale -1.0) with rows stored bottom-to-top as the format
requires. A stack of planes (e.g. a depth PMF) is stored as one
single-channel PFM of height H*n with a ``# planes:`` comment line.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core import as_image


def write_png(path, img) -> None:
    img = as_image(img)
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    mode = "L" if data.shape[2] == 1 else "RGB"
    PILImage.fromarray(data[:, :, 0] if mode == "L" else data, mode=mode).save(str(path))


def read_png(path) -> np.ndarray:
    with PILImage.open(str(path)) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        data = np.asarray(im, dtype=np.float64) / 255.0
    return as_image(data)


def quantize(img) -> np.ndarray:
    """Round-trip through 8-bit storage without touching disk."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def write_pfm(path, data, comment: str | None = None) -> None:
    a = np.asarray(data, dtype=np.float32)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got shape {a.shape}")
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n")
        if comment:
            f.write(b"# " + comment.encode("ascii") + b"\n")
        f.write(f"{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(a[::-1]).astype("<f4").tobytes())


def _read_pfm_raw(path):
    raw = Path(path).read_bytes()
    pos = 0
    fields: list[bytes] = []
    comments: list[str] = []
    while len(fields) < 4:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].strip()
        pos = end + 1
        if line.startswith(b"#"):
            comments.append(line[1:].strip().decode("ascii"))
            continue
        fields.extend(line.split())
    tag, w, h, scale = fields[0], int(fields[1]), int(fields[2]), float(fields[3])
    if tag not in (b"Pf", b"PF"):
        raise ValueError(f"{path}: not a PFM file")
    chans = 3 if tag == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(raw, dtype=dtype, count=w * h * chans, offset=pos)
    arr = arr.reshape(h, w, chans)[::-1].astype(np.float64)
    return arr, comments


def read_pfm(path) -> np.ndarray:
    """Return (H, W) for single-channel files, (H, W, 3) otherwise."""
    arr, _ = _read_pfm_raw(path)
    return arr[:, :, 0] if arr.shape[2] == 1 else arr


def write_plane_stack(path, stack, planes) -> None:
    """Write an (H, W, n) stack as n concatenated H x W planes."""
    stack = np.asarray(stack, dtype=np.float64)
    h, w, n = stack.shape
    if len(planes) != n:
        raise ValueError("one disparity per plane required")
    tall = np.concatenate([stack[:, :, k] for k in range(n)], axis=0)
    write_pfm(path, tall, comment="planes: " + " ".join(f"{float(d):g}" for d in planes))


def read_plane_stack(path) -> tuple[np.ndarray, np.ndarray]:
    arr, comments = _read_pfm_raw(path)
    planes = None
    for c in comments:
        m = re.match(r"planes:\s*(.*)", c)
        if m:
            planes = np.array([float(v) for v in m.group(1).split()])
    if planes is None:
        raise ValueError(f"{path}: missing '# planes:' header")
    n = len(planes)
    tall = arr[:, :, 0]
    if tall.shape[0] % n:
        raise ValueError(f"{path}: height {tall.shape[0]} not divisible by {n} planes")
    h = tall.shape[0] // n
    return np.stack([tall[k * h:(k + 1) * h] for k in range(n)], axis=-1), planes

"""Grayscale image handling: resampling, degradation and patch bookkeeping.

Images are 2-D float64 arrays of shape ``(height, width)`` holding
intensities in ``[0, 1]``. Every public function returns clamped data.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

DEGRADE_FACTORS = (2, 4, 8, 16)

# ITU-R BT.601 luma
_LUMA = np.array([0.299, 0.587, 0.114])


class CoverageGapError(ValueError):
    """Raised when assembled blocks leave output pixels uncovered."""


@dataclass
class PatchSet:
    patch_size: int
    stride: int
    origins: list[tuple[int, int]]
    patches: np.ndarray  # (n, patch_size, patch_size)

    def __len__(self) -> int:
        return len(self.origins)


def as_image(data) -> np.ndarray:
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale array, got shape {img.shape}")
    return np.clip(img, 0.0, 1.0)


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _linear(x: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(x))


def _resample_matrix(n_in: int, n_out: int, kernel: str) -> np.ndarray:
    """Dense (n_out, n_in) interpolation matrix with edge-clamped taps."""
    if kernel == "bicubic":
        fn, support = _cubic, 2
    elif kernel == "bilinear":
        fn, support = _linear, 1
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    centers = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(centers).astype(int)
    offsets = np.arange(-support + 1, support + 1)
    taps = base[:, None] + offsets[None, :]
    weights = fn(centers[:, None] - taps)
    mat = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), len(offsets))
    np.add.at(mat, (rows, np.clip(taps, 0, n_in - 1).ravel()), weights.ravel())
    return mat


def resize(img: np.ndarray, out_w: int, out_h: int, kernel: str = "bicubic") -> np.ndarray:
    """Separable resampling to ``(out_h, out_w)``.

    Bicubic uses the Catmull-Rom kernel (a = -0.5) with no anti-alias
    prefilter when shrinking; samples outside the source replicate the edge.
    An axis whose size does not change is passed through untouched.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be positive, got {out_w}x{out_h}")
    if kernel not in ("bicubic", "bilinear"):
        raise ValueError(f"unknown kernel {kernel!r}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    out = img
    if out_h != h:
        out = _resample_matrix(h, out_h, kernel) @ out
    if out_w != w:
        out = out @ _resample_matrix(w, out_w, kernel).T
    return np.clip(out, 0.0, 1.0)


def check_factor(factor: int) -> int:
    if factor not in DEGRADE_FACTORS:
        raise ValueError(f"factor must be one of {DEGRADE_FACTORS}, got {factor!r}")
    return factor


def downscale(img: np.ndarray, factor: int) -> np.ndarray:
    """Bicubic shrink by ``factor`` with floor rounding of each dimension."""
    check_factor(factor)
    h, w = img.shape
    return resize(img, max(w // factor, 1), max(h // factor, 1))


def degrade(img: np.ndarray, factor: int) -> np.ndarray:
    """Simulate a low-resolution capture: bicubic down then back up to size."""
    h, w = img.shape
    return resize(downscale(img, factor), w, h)


def _grid(extent: int, size: int, stride: int) -> np.ndarray:
    return np.arange(0, extent - size + 1, stride)


def extract_patches(img: np.ndarray, size: int, stride: int) -> PatchSet:
    """Square patches on a regular grid, row-major, no implicit edge patch."""
    img = np.asarray(img)
    h, w = img.shape
    if size < 1 or size > min(h, w):
        raise ValueError(f"patch size {size} does not fit a {w}x{h} image")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    rows, cols = _grid(h, size, stride), _grid(w, size, stride)
    view = np.lib.stride_tricks.sliding_window_view(img, (size, size))
    patches = view[rows[:, None], cols[None, :]].reshape(-1, size, size).copy()
    origins = [(int(r), int(c)) for r in rows for c in cols]
    return PatchSet(size, stride, origins, patches)


def assemble_patches(blocks, origins, out_w: int, out_h: int) -> np.ndarray:
    """Average overlapping blocks into an ``(out_h, out_w)`` image."""
    acc = np.zeros((out_h, out_w))
    count = np.zeros((out_h, out_w))
    for block, (r, c) in zip(blocks, origins):
        block = np.asarray(block, dtype=np.float64)
        bh, bw = block.shape
        if r < 0 or c < 0 or r + bh > out_h or c + bw > out_w:
            raise ValueError(f"block at {(r, c)} of size {bh}x{bw} leaves the output")
        acc[r:r + bh, c:c + bw] += block
        count[r:r + bh, c:c + bw] += 1
    if not count.all():
        gaps = int((count == 0).sum())
        raise CoverageGapError(f"{gaps} output pixels are not covered by any block")
    return np.clip(acc / count, 0.0, 1.0)


def to_gray(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[..., :3].astype(np.float64) @ _LUMA[: arr.shape[-1]]
    return arr


def load_image(path) -> np.ndarray:
    """Read PNG/PGM/other raster as unit-interval grayscale (BT.601 luma)."""
    with PILImage.open(path) as im:
        if im.mode in ("L", "P", "1"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)
        elif im.mode in ("I;16", "I"):
            return as_image(np.asarray(im, dtype=np.float64) / 65535.0)
        else:
            arr = to_gray(np.asarray(im.convert("RGB"), dtype=np.float64))
    return as_image(arr / 255.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    path = Path(path)
    im = PILImage.fromarray(to_uint8(img), mode="L")
    # Pillow writes binary P5 for mode L
    im.save(path, format="PPM" if path.suffix.lower() in (".pgm", ".pnm") else None)

"""Synthetic data for desk-scale runs: textures and annotated eye images."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .image import save_image


def texture_image(size=96, rng=None) -> np.ndarray:
    """Hard-edged discs, bars and striped patches over a flat background.

    Sharp edges are what bicubic upscaling blurs, so these give a learned
    upscaler something to recover.
    """
    rng = np.random.default_rng(rng)
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    img = np.full((size, size), rng.uniform(0.3, 0.7))
    for _ in range(rng.integers(8, 14)):
        kind = rng.integers(3)
        value = rng.uniform(0.05, 0.95)
        if kind == 0:
            cy, cx = rng.uniform(0, size, 2)
            r = rng.uniform(4, size / 4)
            m = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        elif kind == 1:
            y0, x0 = rng.uniform(-size / 4, size, 2)
            hh, ww = rng.uniform(5, size / 2, 2)
            m = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        else:
            ang, period = rng.uniform(0, np.pi), rng.uniform(4, 14)
            m = np.sin((xx * np.cos(ang) + yy * np.sin(ang)) * 2 * np.pi / period) > 0
            cy, cx = rng.uniform(0, size, 2)
            r = rng.uniform(10, size / 3)
            m &= (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[m] = value
    img += 0.02 * ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.0)
    return np.clip(img, 0, 1)


@dataclass
class EyeSpec:
    """Identity of a synthetic eye: iris texture coefficients and geometry."""

    seed: int
    pupil_r: float
    sclera_r: float
    n_terms: int = 40

    def coefficients(self):
        rng = np.random.default_rng(self.seed)
        k_ang = rng.integers(4, 40, self.n_terms)
        k_rad = rng.uniform(0.5, 6.0, self.n_terms)
        phase = rng.uniform(0, 2 * np.pi, (2, self.n_terms))
        amp = rng.uniform(0.3, 1.0, self.n_terms) / np.sqrt(k_ang)
        return k_ang, k_rad, phase, amp


def render_eye(spec: EyeSpec, shape=(280, 320), center=None, rotation=0.0,
               noise=0.01, pupil_r=None, blur=0.7, lighting=0.0, contrast=0.18, rng=None):
    """Render an eye; returns (image, (pupil circle, sclera circle)).

    Circles are ``(cx, cy, r)`` in pixel coordinates. ``rotation`` turns
    the iris texture (radians), simulating head tilt between captures;
    ``blur`` is the defocus sigma and ``lighting`` the strength of a
    left-to-right illumination gradient. ``contrast`` scales the iris
    texture amplitude.
    """
    rng = np.random.default_rng(rng)
    h, w = shape
    cx, cy = center if center is not None else ((w - 1) / 2, (h - 1) / 2)
    pr = spec.pupil_r if pupil_r is None else pupil_r
    sr = spec.sclera_r
    yy, xx = np.mgrid[:h, :w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    rad = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx) - rotation
    t = np.clip((rad - pr) / (sr - pr), 0, 1)
    k_ang, k_rad, phase, amp = spec.coefficients()
    tex = np.zeros_like(rad)
    for ka, kr, p0, p1, a in zip(k_ang, k_rad, phase[0], phase[1], amp):
        tex += a * np.cos(ka * theta + p0) * np.cos(np.pi * kr * t + p1)
    tex = 0.45 + contrast * tex / (np.abs(amp).sum() ** 0.5)
    img = np.full_like(rad, 0.82)  # sclera
    iris = (rad >= pr) & (rad <= sr)
    img[iris] = tex[iris]
    img[rad < pr] = 0.08
    img = ndimage.gaussian_filter(img, blur)
    img *= 1 + lighting * (xx / w - 0.5)
    img += noise * rng.standard_normal(img.shape)
    return np.clip(img, 0, 1), ((cx, cy, pr), (cx, cy, sr))


def write_corpus(out_dir, n_users=6, captures=3, shape=(280, 320), seed=0,
                 eyes=("L",), noise=0.05, contrast=0.1) -> Path:
    """Write a synthetic corpus: PNG images plus ``annotations.csv``.

    Image ids follow the CASIA pattern ``S<user><eye><capture>`` so the
    default eye-id parser applies. Returns the annotation file path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for u in range(n_users):
        for eye in eyes:
            spec = EyeSpec(int(rng.integers(1 << 31)), pupil_r=rng.uniform(24, 34),
                           sclera_r=rng.uniform(92, 104))
            for k in range(captures):
                h, w = shape
                center = (w / 2 + rng.uniform(-12, 12), h / 2 + rng.uniform(-10, 10))
                img, (pupil, sclera) = render_eye(
                    spec, shape, center, rotation=rng.uniform(-0.06, 0.06), noise=noise, contrast=contrast,
                    pupil_r=spec.pupil_r * rng.uniform(0.9, 1.1), blur=rng.uniform(0.5, 2.5),
                    lighting=rng.uniform(-0.3, 0.3), rng=rng)
                image_id = f"S{1001 + u:04d}{eye}{k + 1:02d}"
                save_image(img, out / f"{image_id}.png")
                rows.append([image_id, *[f"{v:.3f}" for v in pupil + sclera]])
    ann = out / "annotations.csv"
    with ann.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "pupil_cx", "pupil_cy", "pupil_r",
                         "sclera_cx", "sclera_cy", "sclera_r"])
        writer.writerows(rows)
    return ann

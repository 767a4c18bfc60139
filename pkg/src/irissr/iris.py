"""Annotation-driven iris recognition.

Preprocessing to a fixed sclera radius, rubber-sheet unwrapping to a
20x240 strip, 1-D log-Gabor phase coding, rotation-compensated Hamming
distance and equal error rate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .image import resize

log = logging.getLogger(__name__)

CROP = 231
RADIAL = 20
ANGULAR = 240


class InvalidAnnotationError(ValueError):
    pass


class IncomparableError(ValueError):
    """Two codes share no valid bit at any tested shift."""


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float


@dataclass(frozen=True)
class SegmentationAnnotation:
    pupil: Circle
    sclera: Circle

    def __post_init__(self):
        p, s = self.pupil, self.sclera
        if not 0 < p.r < s.r:
            raise InvalidAnnotationError(f"need 0 < pupil r ({p.r}) < sclera r ({s.r})")
        if np.hypot(p.cx - s.cx, p.cy - s.cy) >= s.r:
            raise InvalidAnnotationError("pupil centre lies outside the sclera circle")

    @classmethod
    def from_values(cls, pcx, pcy, pr, scx, scy, sr):
        return cls(Circle(float(pcx), float(pcy), float(pr)), Circle(float(scx), float(scy), float(sr)))


def preprocess(img, annotation: SegmentationAnnotation, target_sclera_radius=105.0, size=CROP):
    """Rescale to a common sclera radius and crop ``size`` x ``size`` around the pupil.

    Returns ``(image, annotation)`` in crop coordinates, or ``None`` when
    the crop would leave the rescaled image (the sample is discarded).
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    scale = target_sclera_radius / annotation.sclera.r
    nw, nh = max(1, int(round(w * scale))), max(1, int(round(h * scale)))
    sx, sy = nw / w, nh / h
    scaled = resize(img, nw, nh)

    def move(c: Circle) -> Circle:
        return Circle((c.cx + 0.5) * sx - 0.5, (c.cy + 0.5) * sy - 0.5, c.r * (sx + sy) / 2)

    pupil, sclera = move(annotation.pupil), move(annotation.sclera)
    half = size // 2
    top, left = int(round(pupil.cy)) - half, int(round(pupil.cx)) - half
    if top < 0 or left < 0 or top + size > nh or left + size > nw:
        return None
    crop = scaled[top : top + size, left : left + size].copy()
    shift = lambda c: Circle(c.cx - left, c.cy - top, c.r)  # noqa: E731
    return crop, SegmentationAnnotation(shift(pupil), shift(sclera))


@dataclass
class NormalizedIris:
    strip: np.ndarray  # (20, 240)
    valid_mask: np.ndarray  # (20, 240) bool


def unwrap(img, annotation: SegmentationAnnotation, radial=RADIAL, angular=ANGULAR) -> NormalizedIris:
    """Rubber-sheet model: linear blend from pupil to sclera boundary per angle."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    theta = 2 * np.pi * np.arange(angular) / angular
    t = (np.arange(radial) + 0.5) / radial
    p, s = annotation.pupil, annotation.sclera
    cos, sin = np.cos(theta), np.sin(theta)
    x = (1 - t)[:, None] * (p.cx + p.r * cos) + t[:, None] * (s.cx + s.r * cos)
    y = (1 - t)[:, None] * (p.cy + p.r * sin) + t[:, None] * (s.cy + s.r * sin)
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    if not valid.any():
        raise InvalidAnnotationError("annotation lies entirely outside the image")
    strip = ndimage.map_coordinates(img, [y, x], order=1, mode="nearest")
    return NormalizedIris(np.clip(strip, 0, 1), valid)


@dataclass
class LogGaborConfig:
    wavelength: float = 18.0
    sigma_on_f: float = 0.5
    magnitude_floor: float = 1e-4


@dataclass
class IrisCode:
    bits: np.ndarray  # (20, 240, 2) bool
    mask: np.ndarray  # (20, 240) bool

    @property
    def usable(self) -> bool:
        return bool(self.mask.any())


def log_gabor_filter(n: int, cfg: LogGaborConfig) -> np.ndarray:
    """One-sided frequency response: zero at DC and at negative frequencies."""
    f = np.fft.fftfreq(n)
    g = np.zeros(n)
    pos = f > 0
    if n % 2 == 0:
        pos[n // 2] = True  # Nyquist bin
        f = np.abs(f)
    f0 = 1.0 / cfg.wavelength
    g[pos] = np.exp(-np.log(f[pos] / f0) ** 2 / (2 * np.log(cfg.sigma_on_f) ** 2))
    return g


def log_gabor_encode(norm: NormalizedIris, cfg: LogGaborConfig | None = None) -> IrisCode:
    """Quadrant phase code of each angular row's log-Gabor response."""
    cfg = cfg or LogGaborConfig()
    strip = np.asarray(norm.strip, dtype=np.float64)
    resp = np.fft.ifft(np.fft.fft(strip, axis=1) * log_gabor_filter(strip.shape[1], cfg), axis=1)
    bits = np.stack([resp.real >= 0, resp.imag >= 0], axis=-1)
    mask = norm.valid_mask & (np.abs(resp) >= cfg.magnitude_floor)
    return IrisCode(bits, mask)


def shifted_distances(a: IrisCode, b: IrisCode, max_shift=8) -> dict[int, float]:
    """Normalised Hamming distance of ``a`` rolled by each shift against ``b``."""
    out = {}
    for s in range(-max_shift, max_shift + 1):
        ma = np.roll(a.mask, s, axis=1)
        joint = ma & b.mask
        count = int(joint.sum())
        if count == 0:
            continue
        diff = np.roll(a.bits, s, axis=1) ^ b.bits
        out[s] = float(diff[joint].sum()) / (2 * count)
    return out


def hamming_distance(a: IrisCode, b: IrisCode, max_shift=8) -> float:
    """Lowest masked Hamming distance over shifts in [-max_shift, max_shift]."""
    dists = shifted_distances(a, b, max_shift)
    if not dists:
        raise IncomparableError("codes share no valid bits at any shift")
    return min(dists.values())


@dataclass
class VerificationResult:
    eer: float
    threshold_at_eer: float
    genuine_count: int
    impostor_count: int


def error_rates(genuine, impostor, thresholds):
    """FAR and FRR at each threshold (lower score = more similar).

    FAR(t) = share of impostor scores strictly below t, FRR(t) = share of
    genuine scores strictly above t. A score equal to t counts as neither
    error, which makes the two curves cross symmetrically at ties.
    """
    g = np.sort(np.asarray(genuine, dtype=np.float64))
    i = np.sort(np.asarray(impostor, dtype=np.float64))
    far = np.searchsorted(i, thresholds, side="left") / len(i)
    frr = (len(g) - np.searchsorted(g, thresholds, side="right")) / len(g)
    return far, frr


def compute_eer(genuine, impostor) -> VerificationResult:
    """Equal error rate from a threshold sweep over the merged scores.

    If FAR equals FRR at some threshold that rate is returned; otherwise
    both curves are interpolated linearly between the two neighbouring
    thresholds where FAR - FRR changes sign.
    """
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("need at least one genuine and one impostor score")
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([genuine, impostor])), [np.inf]])
    far, frr = error_rates(genuine, impostor, thresholds)
    d = far - frr
    k = int(np.argmax(d >= 0))  # d[-1] == 1 so a crossing exists
    if d[k] == 0:
        eer, thr = far[k], thresholds[k]
    else:
        alpha = -d[k - 1] / (d[k] - d[k - 1])
        eer = far[k - 1] + alpha * (far[k] - far[k - 1])
        lo, hi = thresholds[k - 1], thresholds[k]
        thr = hi if not np.isfinite(lo) else lo if not np.isfinite(hi) else lo + alpha * (hi - lo)
    return VerificationResult(float(eer), float(thr), int(genuine.size), int(impostor.size))


@dataclass
class Sample:
    """A preprocessed capture; ``image`` is None when it was discarded."""

    sample_id: str
    eye_id: str
    image: Optional[np.ndarray]
    annotation: Optional[SegmentationAnnotation]


@dataclass
class Score:
    query_id: str
    enrolled_id: str
    genuine: bool
    score: float


def encode_sample(img, annotation, cfg: LogGaborConfig | None = None) -> IrisCode:
    return log_gabor_encode(unwrap(img, annotation), cfg)


def match_all(enrolled: Sequence[tuple[str, str, IrisCode]], queries: Sequence[tuple[str, str, IrisCode]],
              max_shift=8) -> list[Score]:
    """Compare every query with every enrolled template from a different capture."""
    scores = []
    for qid, qeye, qcode in queries:
        for eid, eeye, ecode in enrolled:
            if qid == eid:
                continue
            try:
                hd = hamming_distance(qcode, ecode, max_shift)
            except IncomparableError:
                log.warning("pair %s / %s is incomparable, skipped", qid, eid)
                continue
            scores.append(Score(qid, eid, qeye == eeye, hd))
    return scores


def run_verification(scenario: int, enrolled: Sequence[Sample], queries: Sequence[Sample],
                     reconstruct: Callable[[np.ndarray], np.ndarray] | None = None,
                     max_shift=8, cfg: LogGaborConfig | None = None):
    """Verification EER for scenario 1 (HR enrolment, SR queries) or 2 (SR both sides).

    ``reconstruct`` maps a high-resolution image to its degraded-then-
    super-resolved version; None means no degradation. Returns
    ``(VerificationResult, scores)``.
    """
    if scenario not in (1, 2):
        raise ValueError(f"scenario must be 1 or 2, got {scenario!r}")
    dropped = {s.sample_id for s in list(enrolled) + list(queries) if s.image is None}
    for sid in sorted(dropped):
        log.info("sample %s was discarded during preprocessing; dropped from both sides", sid)
    enrolled = [s for s in enrolled if s.sample_id not in dropped]
    queries = [s for s in queries if s.sample_id not in dropped]
    rebuilt: dict[str, IrisCode] = {}

    def sr_code(s: Sample) -> IrisCode:
        if s.sample_id not in rebuilt:
            img = s.image if reconstruct is None else reconstruct(s.image)
            rebuilt[s.sample_id] = encode_sample(img, s.annotation, cfg)
        return rebuilt[s.sample_id]

    if scenario == 1:
        enr = [(s.sample_id, s.eye_id, encode_sample(s.image, s.annotation, cfg)) for s in enrolled]
    else:
        enr = [(s.sample_id, s.eye_id, sr_code(s)) for s in enrolled]
    qry = [(s.sample_id, s.eye_id, sr_code(s)) for s in queries]
    scores = match_all(enr, qry, max_shift)
    gen = [s.score for s in scores if s.genuine]
    imp = [s.score for s in scores if not s.genuine]
    return compute_eer(gen, imp), scores

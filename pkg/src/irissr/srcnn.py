"""Three-layer super-resolution CNN (9x9x64 -> 1x1x32 -> 5x5x1).

Patch training on 33x33 bicubic-degraded inputs against the central
21x21 of the high-resolution patch, three training regimes (from
scratch, transfer, fine-tune) and cascaded full-image inference.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .image import check_factor, degrade, extract_patches, resize
from .nn import ConvLayer, Network, Sgd, SgdConfig, load_weights, save_weights

log = logging.getLogger(__name__)

PATCH = 33
OUT = 21
MARGIN = (PATCH - OUT) // 2  # 6
PROVENANCE = ("scratch", "transfer", "fine-tuned")
REGIMES = {"FS": "scratch", "TL": "transfer", "FT": "fine-tuned"}


class MissingWeightsError(FileNotFoundError):
    pass


@dataclass
class SrcnnModel:
    """The network plus its bookkeeping.

    ``offset`` is subtracted from intensities on the way in and added back
    on the way out. It is a fixed reparameterisation (the first and last
    biases could absorb it) that keeps plain SGD well conditioned.
    """

    net: Network
    trained_factor: int = 2
    provenance: str = "scratch"
    offset: float = 0.5

    def __post_init__(self):
        check_factor(self.trained_factor)
        shapes = [l.weights.shape for l in self.net.layers]
        if shapes != [(9, 9, 1, 64), (1, 1, 64, 32), (5, 5, 32, 1)]:
            raise ValueError(f"not the 9-1-5 SRCNN architecture: {shapes}")
        if self.provenance not in PROVENANCE:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def forward(self, patches):
        """(N, H, W) or (H, W) patches -> (N, H-12, W-12) or (H-12, W-12)."""
        x = np.asarray(patches, dtype=np.float32) - np.float32(self.offset)
        out = self.net.forward(x[..., None] if x.ndim == 3 else x[None, ..., None])
        out = out[..., 0] + np.float32(self.offset)
        return out if x.ndim == 3 else out[0]

    def enhance(self, img):
        """One full-image network pass; reflect padding keeps the size."""
        padded = np.pad(np.asarray(img, dtype=np.float32), MARGIN, mode="reflect")
        return np.clip(self.forward(padded).astype(np.float64), 0.0, 1.0)

    def to_bytes(self) -> bytes:
        return save_weights(self.net, {"arch": "srcnn", "trained_factor": self.trained_factor,
                                       "provenance": self.provenance, "offset": self.offset})

    @classmethod
    def from_bytes(cls, data: bytes) -> "SrcnnModel":
        net, meta = load_weights(data)
        if meta.get("arch", "srcnn") != "srcnn":
            raise ValueError(f"weight file holds a {meta.get('arch')!r} model")
        return cls(net, int(meta.get("trained_factor", 2)), meta.get("provenance", "scratch"),
                   float(meta.get("offset", 0.5)))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SrcnnModel":
        path = Path(path)
        if not path.is_file():
            raise MissingWeightsError(f"no weight file at {path}")
        return cls.from_bytes(path.read_bytes())


DESK_INIT = ("he", "he", 1e-3)


def build_default(factor: int = 2, seed=None, init_std=1e-3) -> SrcnnModel:
    """Random SRCNN with zero biases.

    ``init_std`` is a Gaussian std, ``"he"``, or a 3-tuple of those, one
    per layer. ``DESK_INIT`` trains far faster than the all-1e-3 default.
    """
    check_factor(factor)
    rng = np.random.default_rng(seed)
    stds = tuple(init_std) if isinstance(init_std, (tuple, list)) else (init_std,) * 3
    layers = [
        ConvLayer.create(9, 1, 64, activation="relu", init_std=stds[0], rng=rng),
        ConvLayer.create(1, 64, 32, activation="relu", init_std=stds[1], rng=rng),
        ConvLayer.create(5, 32, 1, activation="linear", init_std=stds[2], rng=rng),
    ]
    return SrcnnModel(Network(layers), factor, "scratch")


@dataclass
class TrainPair:
    input: np.ndarray  # 33x33 degraded
    target: np.ndarray  # 21x21 centre of the HR patch


def make_training_set(hr_images, factor: int, patch_stride: int = 14) -> list[TrainPair]:
    """Co-anchored (degraded, HR-centre) pairs; the whole image is degraded first."""
    check_factor(factor)
    pairs = []
    for i, hr in enumerate(hr_images):
        hr = np.asarray(hr, dtype=np.float64)
        if min(hr.shape) < PATCH:
            log.warning("image %d (%dx%d) is smaller than %d px, skipped", i, *hr.shape[::-1], PATCH)
            continue
        lr = degrade(hr, factor)
        src = extract_patches(lr, PATCH, patch_stride)
        for patch, (r, c) in zip(src.patches, src.origins):
            target = hr[r + MARGIN : r + MARGIN + OUT, c + MARGIN : c + MARGIN + OUT]
            pairs.append(TrainPair(patch, target.copy()))
    return pairs


@dataclass
class SrcnnTrainConfig:
    """Defaults follow the SRCNN lineage: 1e-4 for layers 1-2, 1e-5 for layer 3."""

    learning_rate: float = 1e-4
    last_layer_lr: float = 1e-5
    momentum: float = 0.9
    batch_size: int = 16
    iterations: int = 10_000
    log_every: int = 100
    seed: int = 0

    def sgd(self) -> SgdConfig:
        return SgdConfig(self.learning_rate, self.momentum, self.batch_size, self.iterations)


def desk_config(**overrides) -> SrcnnTrainConfig:
    """Settings that make a from-scratch model useful within ~2000 iterations.

    Pair with ``build_default(..., init_std=DESK_INIT)``.
    """
    base = dict(learning_rate=0.3, last_layer_lr=0.03, iterations=2000, log_every=100)
    base.update(overrides)
    return SrcnnTrainConfig(**base)


@dataclass
class TrainRegime:
    mode: str = "FS"
    factor: int = 2
    sgd: SrcnnTrainConfig = field(default_factory=SrcnnTrainConfig)
    base_weights: object = None  # path, bytes or SrcnnModel

    def __post_init__(self):
        if self.mode not in REGIMES:
            raise ValueError(f"mode must be one of {sorted(REGIMES)}, got {self.mode!r}")
        check_factor(self.factor)
        if self.mode == "FS" and self.base_weights is not None:
            raise ValueError("from-scratch training takes no base weights")


def _load_base(ref) -> SrcnnModel:
    if ref is None:
        raise MissingWeightsError("transfer / fine-tune regimes need base weights")
    if isinstance(ref, SrcnnModel):
        return copy.deepcopy(ref)
    if isinstance(ref, (bytes, bytearray)):
        return SrcnnModel.from_bytes(bytes(ref))
    return SrcnnModel.load(ref)


def _stack(pairs, offset):
    x = np.stack([p.input for p in pairs]).astype(np.float32)[..., None] - np.float32(offset)
    y = np.stack([p.target for p in pairs]).astype(np.float32)[..., None] - np.float32(offset)
    return x, y


def fit(model: SrcnnModel, pairs, cfg: SrcnnTrainConfig):
    """Mini-batch SGD on ``pairs``; returns [(iteration, mean mse since last row)]."""
    x, y = _stack(pairs, model.offset)
    net = model.net
    opt = Sgd(cfg.sgd())
    lrs = [cfg.learning_rate] * 4 + [cfg.last_layer_lr] * 2
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(x))
    pos, history, window = 0, [], []
    for it in range(1, cfg.iterations + 1):
        if pos + cfg.batch_size > len(order):
            order, pos = rng.permutation(len(x)), 0
        idx = order[pos : pos + cfg.batch_size]
        pos += cfg.batch_size
        loss, grads = net.loss_and_grads(x[idx], y[idx])
        if not math.isfinite(loss):
            raise FloatingPointError(f"training diverged at iteration {it}")
        opt.step(net.params(), grads, lrs)
        window.append(loss)
        if it % cfg.log_every == 0 or it == cfg.iterations:
            history.append((it, float(np.mean(window))))
            window = []
    return history


def train(model, pairs, regime: TrainRegime):
    """Apply a training regime; returns ``(model, loss_history)``.

    FS trains ``model`` from its random initialisation. TL returns the base
    weights untouched. FT continues training the base weights on ``pairs``.
    """
    if regime.mode == "TL":
        base = _load_base(regime.base_weights)
        base.provenance = "transfer"
        return base, []
    if not pairs:
        raise ValueError("no training pairs")
    if regime.mode == "FT":
        model = _load_base(regime.base_weights)
        model.provenance = "fine-tuned"
    elif model is None:
        model = build_default(regime.factor, seed=regime.sgd.seed)
    model.trained_factor = regime.factor
    history = fit(model, pairs, regime.sgd) if regime.sgd.iterations else []
    return model, history


def pass_count(target_factor: int, trained_factor: int) -> int:
    check_factor(trained_factor)
    if target_factor < 1 or target_factor & (target_factor - 1):
        raise ValueError(f"target factor must be a power of two, got {target_factor}")
    k = math.log2(target_factor) / math.log2(trained_factor)
    if k < 1 or k != int(k):
        raise ValueError(f"factor {target_factor} is not reachable by whole passes "
                         f"of a factor-{trained_factor} model")
    return int(k)


def cascade(img, target_factor, trained_factor, enhance, out_shape=None, on_pass=None):
    """Upscale ``img`` by ``target_factor`` through repeated (bicubic, enhance) passes.

    Each pass grows the image by ``trained_factor``; intermediate sizes are
    floor(final / trained_factor**remaining) so that the last pass lands on
    ``out_shape`` exactly (e.g. 29 -> 57 -> 115 -> 231).
    """
    k = pass_count(target_factor, trained_factor)
    img = np.asarray(img, dtype=np.float64)
    out_h, out_w = out_shape or (img.shape[0] * target_factor, img.shape[1] * target_factor)
    for j in range(1, k + 1):
        scale = trained_factor ** (k - j)
        img = resize(img, out_w // scale, out_h // scale)
        img = enhance(img)
        if on_pass is not None:
            on_pass(j, img)
    return img


def super_resolve(img, target_factor: int, model: SrcnnModel, out_shape=None, on_pass=None):
    return cascade(img, target_factor, model.trained_factor, model.enhance, out_shape, on_pass)

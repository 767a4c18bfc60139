"""Stacked auto-encoder super-resolution.

Four auto-encoders (1089-1000, 1000-2000, 2000-2600, 2600-2000) are
pretrained greedily on degraded 33x33 patches, stacked, topped with a
2000-441 output layer and fine-tuned against the central 21x21 of the
high-resolution patches.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .image import assemble_patches
from .nn import DenseLayer, Network, load_weights, mse_loss, save_weights, Sgd, SgdConfig
from .srcnn import MARGIN, OUT, PATCH, MissingWeightsError, cascade

log = logging.getLogger(__name__)

SAE_DIMS = (1089, 1000, 2000, 2600, 2000, 441)


class UntrainedModelError(RuntimeError):
    pass


@dataclass
class SaeTrainConfig:
    learning_rate: float = 0.2
    epochs: int = 150
    batch_size: int = 32
    momentum: float = 0.9
    # sigmoid layers; the linear output/decoder layers always use fan_in
    init: str = "glorot_sigmoid"
    # pretraining stops early once an epoch improves the loss by less than this fraction
    min_improvement: float = 1e-4
    hidden_activation: str = "sigmoid"
    output_activation: str = "linear"
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class Autoencoder:
    encoder: DenseLayer
    decoder: DenseLayer

    def __post_init__(self):
        if self.decoder.out_dim != self.encoder.in_dim or self.decoder.in_dim != self.encoder.out_dim:
            raise ValueError("decoder must map the hidden code back to the input size")

    def encode(self, x):
        return self.encoder.forward(x)

    def reconstruct(self, x):
        return self.decoder.forward(self.encoder.forward(x))

    def reconstruction_mse(self, x) -> float:
        return mse_loss(self.reconstruct(x), np.asarray(x, dtype=np.float32))[0]


def train_network(net: Network, x, y, cfg: SaeTrainConfig, early_stop=False):
    """Epoch-based mini-batch gradient descent; returns the per-epoch mean loss."""
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.float32)
    opt = Sgd(SgdConfig(cfg.learning_rate, cfg.momentum, cfg.batch_size, cfg.epochs))
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        losses = []
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = net.loss_and_grads(x[idx], y[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"training diverged in epoch {epoch + 1}")
            opt.step(net.params(), grads)
            losses.append(loss * len(idx))
        history.append(float(sum(losses) / len(x)))
        if early_stop and len(history) > 1:
            prev, cur = history[-2], history[-1]
            if prev - cur < cfg.min_improvement * prev:
                log.debug("pretraining stopped after %d epochs", epoch + 1)
                break
    return history


def _init_for(activation, cfg):
    return cfg.init if activation == "sigmoid" else "fan_in"


def pretrain_layer(data, in_dim: int, hidden_dim: int, cfg: SaeTrainConfig | None = None,
                   activation: str | None = None, decoder_activation: str | None = None):
    """Train one auto-encoder to reproduce ``data``; returns (Autoencoder, history)."""
    cfg = cfg or SaeTrainConfig()
    data = np.asarray(data, dtype=np.float32)
    if data.size == 0:
        raise ValueError("no pretraining data")
    if data.ndim != 2 or data.shape[1] != in_dim:
        raise ValueError(f"data must be (n, {in_dim}), got {data.shape}")
    rng = np.random.default_rng(cfg.seed)
    enc_act = activation or cfg.hidden_activation
    dec_act = decoder_activation or cfg.output_activation
    enc = DenseLayer.create(in_dim, hidden_dim, activation=enc_act, init=_init_for(enc_act, cfg), rng=rng)
    dec = DenseLayer.create(hidden_dim, in_dim, activation=dec_act, init=_init_for(dec_act, cfg), rng=rng)
    history = train_network(Network([enc, dec]), data, data, cfg, early_stop=True)
    return Autoencoder(enc, dec), history


def pretrain_stack(inputs, cfg: SaeTrainConfig | None = None, dims=SAE_DIMS[:-1]):
    """Greedy layer-wise pretraining; each stage learns the previous hidden code."""
    cfg = cfg or SaeTrainConfig()
    data = np.asarray(inputs, dtype=np.float32)
    stages = []
    for d_in, d_hid in zip(dims[:-1], dims[1:]):
        ae, hist = pretrain_layer(data, d_in, d_hid, cfg)
        log.info("pretrained %d-%d-%d: mse %.5g -> %.5g", d_in, d_hid, d_in, hist[0], hist[-1])
        stages.append(ae)
        data = ae.encode(data)
    return stages


@dataclass
class SaeModel:
    net: Network
    trained_factor: int = 2
    pretrained: list = field(default_factory=lambda: [False] * 4)
    trained: bool = False

    def __post_init__(self):
        dims = tuple([self.net.layers[0].in_dim] + [l.out_dim for l in self.net.layers])
        if dims != SAE_DIMS:
            raise ValueError(f"layer chain {dims} is not {SAE_DIMS}")

    @classmethod
    def from_layers(cls, encoders, output: DenseLayer, **kw) -> "SaeModel":
        return cls(Network(list(encoders) + [output]), **kw)

    @property
    def encoders(self):
        return self.net.layers[:-1]

    @property
    def output_layer(self):
        return self.net.layers[-1]

    def forward(self, x):
        return self.net.forward(np.asarray(x, dtype=np.float32))

    def to_bytes(self) -> bytes:
        return save_weights(self.net, {"arch": "sae", "trained_factor": self.trained_factor,
                                       "pretrained": list(self.pretrained), "trained": self.trained})

    @classmethod
    def from_bytes(cls, data: bytes) -> "SaeModel":
        net, meta = load_weights(data)
        if meta.get("arch") != "sae":
            raise ValueError(f"weight file holds a {meta.get('arch')!r} model")
        return cls(net, int(meta.get("trained_factor", 2)), list(meta.get("pretrained", [False] * 4)),
                   bool(meta.get("trained", False)))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SaeModel":
        path = Path(path)
        if not path.is_file():
            raise MissingWeightsError(f"no weight file at {path}")
        return cls.from_bytes(path.read_bytes())


def vectorize(patch) -> np.ndarray:
    return np.asarray(patch).reshape(-1)


def pair_arrays(pairs):
    x = np.stack([vectorize(p.input) for p in pairs]).astype(np.float32)
    y = np.stack([vectorize(p.target) for p in pairs]).astype(np.float32)
    return x, y


def stack_and_fine_tune(layers, pairs, cfg: SaeTrainConfig | None = None, trained_factor=2,
                        output_layer: DenseLayer | None = None):
    """Stack pretrained encoders, add the 441-unit output layer, train end to end.

    ``layers`` holds Autoencoders or bare encoder DenseLayers. Returns
    ``(SaeModel, history)``; the history starts with the loss before the
    first update.
    """
    cfg = cfg or SaeTrainConfig()
    encoders = [l.encoder if isinstance(l, Autoencoder) else l for l in layers]
    dims = [encoders[0].in_dim] if encoders else []
    for a, b in zip(encoders, encoders[1:]):
        if a.out_dim != b.in_dim:
            raise ValueError(f"encoder chain breaks between {a.out_dim} and {b.in_dim}")
    dims += [e.out_dim for e in encoders]
    if tuple(dims) != SAE_DIMS[:-1]:
        raise ValueError(f"encoder chain {tuple(dims)} does not match {SAE_DIMS[:-1]}")
    if output_layer is None:
        output_layer = DenseLayer.create(SAE_DIMS[-2], SAE_DIMS[-1], activation=cfg.output_activation,
                                         init=_init_for(cfg.output_activation, cfg),
                                         rng=np.random.default_rng(cfg.seed + 1))
    model = SaeModel.from_layers(encoders, output_layer, trained_factor=trained_factor,
                                 pretrained=[isinstance(l, Autoencoder) for l in layers])
    x, y = pair_arrays(pairs)
    start = mse_loss(model.forward(x), y)[0]
    history = [start] + train_network(model.net, x, y, cfg)
    model.trained = True
    return model, history


def train_sae(pairs, cfg: SaeTrainConfig | None = None, pretrain_cfg: SaeTrainConfig | None = None,
              trained_factor=2):
    """Full recipe: pretrain on degraded inputs, then fine-tune on the pairs."""
    cfg = cfg or SaeTrainConfig()
    x, _ = pair_arrays(pairs)
    stages = pretrain_stack(x, pretrain_cfg or cfg)
    return stack_and_fine_tune(stages, pairs, cfg, trained_factor)


def reconstruct_patches(model: SaeModel, patches, batch=256) -> np.ndarray:
    """(N, 33, 33) degraded patches -> (N, 21, 21) reconstructions in [0, 1]."""
    if not model.trained:
        raise UntrainedModelError("model has not been fine-tuned")
    patches = np.asarray(patches, dtype=np.float32)
    flat = patches.reshape(len(patches), -1)
    out = np.concatenate([model.forward(flat[i : i + batch]) for i in range(0, len(flat), batch)])
    return np.clip(out.reshape(-1, OUT, OUT).astype(np.float64), 0.0, 1.0)


def reconstruct_patch(model: SaeModel, patch33) -> np.ndarray:
    patch33 = np.asarray(patch33)
    if patch33.shape != (PATCH, PATCH):
        raise ValueError(f"expected a {PATCH}x{PATCH} patch, got {patch33.shape}")
    return reconstruct_patches(model, patch33[None])[0]


def _anchors(extent, stride):
    last = extent - PATCH
    grid = list(range(0, last + 1, stride))
    if grid[-1] != last:
        grid.append(last)
    return grid


def enhance(model: SaeModel, img, stride=7) -> np.ndarray:
    """One full-image pass: overlapping 21x21 reconstructions, averaged.

    The image is reflect-padded by 6 px so the reconstructed centres tile
    the whole original extent; an edge-anchored final row and column of
    patches closes any gap the stride leaves.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    # images narrower than one output block get extra reflected rows/columns, cropped afterwards
    eh, ew = max(h, OUT), max(w, OUT)
    padded = np.pad(img, ((MARGIN, MARGIN + eh - h), (MARGIN, MARGIN + ew - w)), mode="reflect")
    origins = [(r, c) for r in _anchors(eh + 2 * MARGIN, stride) for c in _anchors(ew + 2 * MARGIN, stride)]
    patches = np.stack([padded[r : r + PATCH, c : c + PATCH] for r, c in origins])
    blocks = reconstruct_patches(model, patches)
    return assemble_patches(blocks, origins, ew, eh)[:h, :w]


def super_resolve_sae(img, target_factor: int, model: SaeModel, stride=7, out_shape=None, on_pass=None):
    return cascade(img, target_factor, model.trained_factor, lambda im: enhance(model, im, stride),
                   out_shape, on_pass)

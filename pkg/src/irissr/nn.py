"""A small numpy engine for convolutional and dense networks.

Feature maps are channels-last: ``(H, W, C)`` for one sample or
``(N, H, W, C)`` for a batch. Dense inputs are ``(n,)`` or ``(N, n)``.
Convolution is valid cross-correlation, as in most deep learning code.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

ACTIVATIONS = ("linear", "relu", "sigmoid")

# im2col above this many elements switches to per-offset accumulation
_IM2COL_LIMIT = 1 << 24


class CorruptWeightsError(ValueError):
    pass


@dataclass
class ConvLayer:
    weights: np.ndarray  # (k, k, in_channels, out_channels)
    bias: np.ndarray  # (out_channels,)
    stride: int = 1
    padding: int = 0
    activation: str = "linear"

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[0] != self.weights.shape[1]:
            raise ValueError(f"conv weights must be (k, k, cin, cout), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[3],):
            raise ValueError("bias length must equal out_channels")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def create(cls, kernel_size, in_channels, out_channels, *, stride=1, padding=0,
               activation="linear", init_std=1e-3, rng=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        shape = (kernel_size, kernel_size, in_channels, out_channels)
        if init_std == "he":
            init_std = np.sqrt(2.0 / (kernel_size * kernel_size * in_channels))
        w = rng.normal(0.0, init_std, size=shape).astype(dtype)
        return cls(w, np.zeros(out_channels, dtype=dtype), stride, padding, activation)

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]

    def params(self) -> list[np.ndarray]:
        return [self.weights, self.bias]

    def forward(self, x):
        return conv_forward(x, self)

    def backward(self, x, grad):
        return conv_backward(x, self, grad)


@dataclass
class DenseLayer:
    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "linear"

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ValueError("dense weights must be (in, out) with a matching bias")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def create(cls, in_dim, out_dim, *, activation="linear", init="fan_in", rng=None,
               dtype=np.float32):
        """Uniform weights, zero bias.

        ``init="fan_in"`` draws from +-1/sqrt(in_dim); ``"glorot_sigmoid"``
        from +-4 sqrt(6 / (in_dim + out_dim)), which keeps the signal alive
        through deep sigmoid stacks.
        """
        rng = np.random.default_rng(rng)
        if init == "fan_in":
            bound = 1.0 / np.sqrt(in_dim)
        elif init == "glorot_sigmoid":
            bound = 4.0 * np.sqrt(6.0 / (in_dim + out_dim))
        else:
            raise ValueError(f"unknown init {init!r}")
        w = rng.uniform(-bound, bound, size=(in_dim, out_dim)).astype(dtype)
        return cls(w, np.zeros(out_dim, dtype=dtype), activation)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def params(self) -> list[np.ndarray]:
        return [self.weights, self.bias]

    def forward(self, x):
        return dense_forward(x, self)

    def backward(self, x, grad):
        return dense_backward(x, self, grad)


# -- activations --------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_grad(x):
    """Derivative of relu with the subgradient at 0 taken as 0."""
    return (x > 0).astype(np.asarray(x).dtype)


def activate(z, kind: str):
    if kind == "relu":
        return relu(z)
    if kind == "sigmoid":
        return expit(z)
    return z


def activation_grad(z, a, kind: str):
    """d activation / d z, given pre-activation z and output a."""
    if kind == "relu":
        return relu_grad(z)
    if kind == "sigmoid":
        return a * (1 - a)
    return np.ones_like(z)


# -- convolution --------------------------------------------------------------

def _as_batch(x, ndim):
    x = np.asarray(x)
    if x.ndim == ndim - 1:
        return x[None], False
    if x.ndim != ndim:
        raise ValueError(f"expected {ndim - 1}-D or {ndim}-D input, got shape {x.shape}")
    return x, True


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def _out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _columns(xp, k, s, ho, wo):
    """im2col: (N*ho*wo, k*k*C) in (ky, kx, c) order."""
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    # win: (N, ho, wo, C, k, k)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k * k * xp.shape[3])


def conv_forward(x, layer: ConvLayer):
    """Valid cross-correlation plus bias (no activation)."""
    xb, batched = _as_batch(x, 4)
    n, h, w, c = xb.shape
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    if c != layer.in_channels:
        raise ValueError(f"input has {c} channels, layer expects {layer.in_channels}")
    ho, wo = _out_size(h, k, s, p), _out_size(w, k, s, p)
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{w} too small for kernel {k} with padding {p}")
    xp = _pad(xb.astype(layer.weights.dtype, copy=False), p)
    cout = layer.out_channels
    if k == 1 and s == 1:
        out = xp.reshape(-1, c) @ layer.weights.reshape(c, cout)
    elif n * ho * wo * k * k * c <= _IM2COL_LIMIT:
        out = _columns(xp, k, s, ho, wo) @ layer.weights.reshape(-1, cout)
    else:
        out = np.zeros((n, ho, wo, cout), dtype=layer.weights.dtype)
        for i in range(k):
            for j in range(k):
                tap = xp[:, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s]
                out += tap @ layer.weights[i, j]
    out = out.reshape(n, ho, wo, cout) + layer.bias
    return out if batched else out[0]


def conv_backward(x, layer: ConvLayer, upstream, need_input_grad=True):
    """Gradients of the linear convolution: (grad_weights, grad_bias, grad_input).

    ``grad_input`` is None when ``need_input_grad`` is false.
    """
    xb, batched = _as_batch(x, 4)
    gb, _ = _as_batch(upstream, 4)
    n, h, w, c = xb.shape
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    ho, wo = _out_size(h, k, s, p), _out_size(w, k, s, p)
    cout = layer.out_channels
    if gb.shape != (n, ho, wo, cout):
        raise ValueError(f"upstream gradient shape {gb.shape} != output shape {(n, ho, wo, cout)}")
    dtype = layer.weights.dtype
    xp = _pad(xb.astype(dtype, copy=False), p)
    g2 = gb.reshape(-1, cout).astype(dtype, copy=False)
    grad_w = (_columns(xp, k, s, ho, wo).T @ g2).reshape(layer.weights.shape)
    grad_b = g2.sum(axis=0)
    if not need_input_grad:
        return grad_w, grad_b, None
    gb4 = g2.reshape(n, ho, wo, cout)
    if s == 1:
        # full correlation of the upstream gradient with the flipped kernel
        flipped = layer.weights[::-1, ::-1].transpose(0, 1, 3, 2)
        gxp = _columns(_pad(gb4, k - 1), k, 1, xp.shape[1], xp.shape[2]) @ flipped.reshape(-1, c)
        gxp = gxp.reshape(xp.shape)
    else:
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                win = (slice(None), slice(i, i + (ho - 1) * s + 1, s), slice(j, j + (wo - 1) * s + 1, s))
                gxp[win] += gb4 @ layer.weights[i, j].T
    grad_x = gxp[:, p : p + h, p : p + w] if p else gxp
    return grad_w, grad_b, grad_x if batched else grad_x[0]


# -- dense ----------------------------------------------------------------------

def dense_forward(x, layer: DenseLayer):
    """activation(x @ W + b)."""
    x = np.asarray(x)
    if x.shape[-1] != layer.in_dim:
        raise ValueError(f"input length {x.shape[-1]} != layer in_dim {layer.in_dim}")
    return activate(x.astype(layer.weights.dtype, copy=False) @ layer.weights + layer.bias,
                    layer.activation)


def dense_backward(x, layer: DenseLayer, upstream):
    """Gradients through the activation and the affine map."""
    xb, batched = _as_batch(x, 2)
    gb, _ = _as_batch(upstream, 2)
    if xb.shape[1] != layer.in_dim or gb.shape != (xb.shape[0], layer.out_dim):
        raise ValueError("input or upstream gradient does not match the layer dimensions")
    xb = xb.astype(layer.weights.dtype, copy=False)
    z = xb @ layer.weights + layer.bias
    dz = gb * activation_grad(z, activate(z, layer.activation), layer.activation)
    grad_w = xb.T @ dz
    grad_b = dz.sum(axis=0)
    grad_x = dz @ layer.weights.T
    return grad_w, grad_b, grad_x if batched else grad_x[0]


# -- loss -------------------------------------------------------------------------

def mse_loss(pred, target):
    """Mean squared error over every element and its gradient w.r.t. ``pred``."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(pred.dtype if pred.dtype.kind == "f" else np.float64)


# -- networks -------------------------------------------------------------------

class Network:
    """A plain stack of layers, each followed by its own activation."""

    def __init__(self, layers):
        self.layers = list(layers)
        self._cache = None

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def _pre(self, layer, x):
        if isinstance(layer, ConvLayer):
            return conv_forward(x, layer)
        x = np.asarray(x)
        return x.astype(layer.weights.dtype, copy=False) @ layer.weights + layer.bias

    def forward(self, x, keep=False):
        cache = []
        for layer in self.layers:
            z = self._pre(layer, x)
            a = activate(z, layer.activation)
            if keep:
                cache.append((x, z, a))
            x = a
        self._cache = cache if keep else None
        return x

    def backward(self, grad):
        """Parameter gradients (aligned with ``params()``) for the last kept forward."""
        if self._cache is None:
            raise RuntimeError("call forward(..., keep=True) before backward")
        grads = []
        for depth, layer, (x, z, a) in zip(range(len(self.layers) - 1, -1, -1),
                                           reversed(self.layers), reversed(self._cache)):
            dz = grad * activation_grad(z, a, layer.activation)
            if isinstance(layer, ConvLayer):
                gw, gb, grad = conv_backward(x, layer, dz, need_input_grad=depth > 0)
            else:
                xb, _ = _as_batch(x, 2)
                dzb, _ = _as_batch(dz, 2)
                gw, gb = xb.T @ dzb, dzb.sum(axis=0)
                grad = dz @ layer.weights.T
            grads = [gw, gb] + grads
        return grads

    def loss_and_grads(self, x, target):
        pred = self.forward(x, keep=True)
        loss, g = mse_loss(pred, target)
        return loss, self.backward(g)

    def astype(self, dtype) -> "Network":
        layers = []
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                layers.append(ConvLayer(layer.weights.astype(dtype), layer.bias.astype(dtype),
                                        layer.stride, layer.padding, layer.activation))
            else:
                layers.append(DenseLayer(layer.weights.astype(dtype), layer.bias.astype(dtype),
                                         layer.activation))
        return Network(layers)


# -- optimisation -----------------------------------------------------------------

@dataclass
class SgdConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 16
    iterations: int = 1000

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")


@dataclass
class Sgd:
    """SGD with heavy-ball momentum, updating parameters in place.

    v <- momentum * v + grad;  p <- p - lr * v
    """

    config: SgdConfig
    velocity: list = field(default_factory=list)

    def step(self, params, grads, lrs=None):
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        if not self.velocity:
            self.velocity = [np.zeros_like(p) for p in params]
        mu = self.config.momentum
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != g.shape:
                raise ValueError(f"param {i}: shape {p.shape} vs grad {g.shape}")
            lr = self.config.learning_rate if lrs is None else lrs[i]
            v = self.velocity[i]
            v *= mu
            v += g
            p -= (lr * v).astype(p.dtype, copy=False)
        return params


def sgd_step(params, grads, config: SgdConfig, velocity=None):
    """Functional single step; returns (new_params, new_velocity)."""
    params = [np.array(p, dtype=np.float64) for p in params]
    opt = Sgd(config, [np.array(v, dtype=np.float64) for v in velocity] if velocity else [])
    opt.step(params, [np.asarray(g, dtype=np.float64) for g in grads])
    return params, opt.velocity


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int


def _relu_pattern(net: Network, x):
    net.forward(x, keep=True)
    pattern = [z > 0 for layer, (_, z, _) in zip(net.layers, net._cache) if layer.activation == "relu"]
    net._cache = None
    return pattern


def grad_check_report(model: Network, x, target, eps=1e-4, n_samples=200, rng=0) -> GradCheckResult:
    """Compare backprop with central differences on sampled parameters.

    Runs on a float64 copy of ``model``. A perturbation that flips any
    ReLU on or off straddles a kink, where a central difference averages
    two slopes and says nothing about the gradient; such draws are
    replaced by fresh ones and counted in ``skipped_kinks``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(rng)
    net = model.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _, grads = net.loss_and_grads(x, target)
    base = _relu_pattern(net, x)
    params = net.params()
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = rng.choice(total, size=min(total, 20 * n_samples), replace=False)
    worst, checked, skipped = 0.0, 0, 0
    for flat in picks:
        if checked == n_samples:
            break
        t = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(flat - offsets[t], params[t].shape)
        orig = params[t][idx]
        losses = []
        kink = False
        for value in (orig + eps, orig - eps):
            params[t][idx] = value
            if base and any((a != b).any() for a, b in zip(base, _relu_pattern(net, x))):
                kink = True
                break
            losses.append(mse_loss(net.forward(x), target)[0])
        params[t][idx] = orig
        if kink:
            skipped += 1
            continue
        numeric = (losses[0] - losses[1]) / (2 * eps)
        analytic = grads[t][idx]
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
        checked += 1
    return GradCheckResult(float(worst), checked, skipped)


def grad_check(model: Network, x, target, eps=1e-4, n_samples=200, rng=0) -> float:
    """Max relative error between backprop and central differences (see ``grad_check_report``)."""
    return grad_check_report(model, x, target, eps, n_samples, rng).max_rel_error


# -- weight files -----------------------------------------------------------------
#
# little-endian:
#   "NNW1" | u32 version | u32 layer_count | u32 meta_len | meta (UTF-8 JSON)
#   per layer: u8 kind (0 conv, 1 dense)
#     conv:  u32 kernel, in_ch, out_ch, stride, padding, activation
#     dense: u32 in_dim, out_dim, activation
#     float32 weights (C order) then float32 bias
#   u32 CRC32 of everything before it

MAGIC = b"NNW1"
VERSION = 1
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}


def save_weights(model: Network, metadata: dict | None = None) -> bytes:
    buf = io.BytesIO()
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    buf.write(MAGIC + struct.pack("<III", VERSION, len(model.layers), len(meta)) + meta)
    for layer in model.layers:
        if isinstance(layer, ConvLayer):
            buf.write(struct.pack("<B6I", 0, layer.kernel_size, layer.in_channels,
                                  layer.out_channels, layer.stride, layer.padding,
                                  _ACT_CODE[layer.activation]))
        else:
            buf.write(struct.pack("<B3I", 1, layer.in_dim, layer.out_dim,
                                  _ACT_CODE[layer.activation]))
        for p in layer.params():
            buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def load_weights(data: bytes) -> tuple[Network, dict]:
    """Inverse of ``save_weights``; returns the network and its metadata."""
    if len(data) < 20 or data[:4] != MAGIC:
        raise CorruptWeightsError("bad magic or truncated header")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptWeightsError("checksum mismatch")
    version, count, meta_len = struct.unpack_from("<III", body, 4)
    if version != VERSION:
        raise CorruptWeightsError(f"unsupported version {version}")
    pos = 16
    try:
        metadata = json.loads(body[pos : pos + meta_len].decode())
        pos += meta_len
        layers = []
        for _ in range(count):
            kind = body[pos]
            if kind == 0:
                k, cin, cout, stride, pad, act = struct.unpack_from("<6I", body, pos + 1)
                pos += 25
                shapes = [(k, k, cin, cout), (cout,)]
            elif kind == 1:
                din, dout, act = struct.unpack_from("<3I", body, pos + 1)
                pos += 13
                shapes = [(din, dout), (dout,)]
            else:
                raise CorruptWeightsError(f"unknown layer kind {kind}")
            arrays = []
            for shape in shapes:
                n = int(np.prod(shape))
                if pos + 4 * n > len(body):
                    raise CorruptWeightsError("truncated layer data")
                arrays.append(np.frombuffer(body, dtype="<f4", count=n, offset=pos)
                              .reshape(shape).astype(np.float32))
                pos += 4 * n
            activation = ACTIVATIONS[act]
            if kind == 0:
                layers.append(ConvLayer(arrays[0], arrays[1], stride, pad, activation))
            else:
                layers.append(DenseLayer(arrays[0], arrays[1], activation))
    except (struct.error, IndexError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptWeightsError(f"malformed weight stream: {exc}") from exc
    if pos != len(body):
        raise CorruptWeightsError("trailing bytes after last layer")
    return Network(layers), metadata

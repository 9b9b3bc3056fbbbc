"""Small numpy CNN engine: valid conv, max pooling, dense layers, softmax.

Activations are NHWC (batch, height, width, channel). Conv weights are stored
kernel-major as ``(count, kh, kw, in_channels)`` so every kernel is one
contiguous row-major block; dense weights are ``(units, in_features)`` with
the input flattened in (h, w, c) order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels

KINDS = ("conv", "maxpool", "fully_connected", "relu", "softmax")
KIND_TAGS = {kind: i + 1 for i, kind in enumerate(KINDS)}

FLOAT_MAGIC = b"HGRF"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel_count: int = 0
    kernel_h: int = 0
    kernel_w: int = 0
    in_channels: int = 0
    window: int = 0
    stride: int = 0
    units: int = 0
    in_features: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @classmethod
    def conv(cls, kernel_count, kernel_h, kernel_w, in_channels):
        return cls("conv", kernel_count=kernel_count, kernel_h=kernel_h,
                   kernel_w=kernel_w, in_channels=in_channels)

    @classmethod
    def maxpool(cls, window, stride=None):
        return cls("maxpool", window=window, stride=window if stride is None else stride)

    @classmethod
    def fc(cls, units, in_features):
        return cls("fully_connected", units=units, in_features=in_features)

    @classmethod
    def relu(cls):
        return cls("relu")

    @classmethod
    def softmax(cls):
        return cls("softmax")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "fully_connected")

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "conv":
            return (self.kernel_count, self.kernel_h, self.kernel_w, self.in_channels)
        if self.kind == "fully_connected":
            return (self.units, self.in_features)
        return ()

    @property
    def n_kernels(self) -> int:
        return self.weight_shape[0] if self.has_params else 0

    @property
    def dims(self) -> tuple:
        """The four u32 header fields written to model files."""
        if self.kind == "conv":
            return (self.kernel_count, self.kernel_h, self.kernel_w, self.in_channels)
        if self.kind == "maxpool":
            return (self.window, self.stride, 0, 0)
        if self.kind == "fully_connected":
            return (self.units, self.in_features, 0, 0)
        return (0, 0, 0, 0)

    @classmethod
    def from_dims(cls, kind, dims):
        a, b, c, d = dims
        if kind == "conv":
            return cls.conv(a, b, c, d)
        if kind == "maxpool":
            return cls.maxpool(a, b)
        if kind == "fully_connected":
            return cls.fc(a, b)
        return cls(kind)

    def output_shape(self, shape: tuple) -> tuple:
        if self.kind == "conv":
            h, w, c = shape
            if c != self.in_channels:
                raise ShapeError(f"conv expects {self.in_channels} input channels, got {c}")
            if h < self.kernel_h or w < self.kernel_w:
                raise ShapeError(f"input {h}x{w} smaller than kernel {self.kernel_h}x{self.kernel_w}")
            return (h - self.kernel_h + 1, w - self.kernel_w + 1, self.kernel_count)
        if self.kind == "maxpool":
            h, w, c = shape
            _check_pool(h, w, self.window, self.stride)
            return (h // self.stride, w // self.stride, c)
        if self.kind == "fully_connected":
            n = int(np.prod(shape))
            if n != self.in_features:
                raise ShapeError(f"dense layer expects {self.in_features} inputs, got {n}")
            return (self.units,)
        return tuple(shape)


def _check_pool(h, w, window, stride):
    if window != stride:
        raise ShapeError("only non-overlapping pooling (window == stride) is supported")
    if h % stride or w % stride:
        raise ShapeError(f"pool stride {stride} does not divide input {h}x{w}")


def canonical_layers(n_classes: int = 10) -> list[LayerSpec]:
    """Conv1 50@5x5 / Pool 2 / Conv2 20@3x3 / Pool 3 / FC 50 / FC n_classes."""
    return [
        LayerSpec.conv(50, 5, 5, 1),
        LayerSpec.relu(),
        LayerSpec.maxpool(2, 2),
        LayerSpec.conv(20, 3, 3, 50),
        LayerSpec.relu(),
        LayerSpec.maxpool(3, 3),
        LayerSpec.fc(50, 7 * 7 * 20),
        LayerSpec.relu(),
        LayerSpec.fc(n_classes, 50),
        LayerSpec.softmax(),
    ]


# ---------------------------------------------------------------- primitives

def _batched(x, ndim):
    x = np.asarray(x)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim - 1}-D or {ndim}-D array, got shape {x.shape}")
    return x, False


def _im2col(x, kh, kw):
    # (N, H, W, C) -> (N, OH, OW, kh*kw*C), patch order (kh, kw, c)
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # N, OH, OW, C, kh, kw
    n, oh, ow = win.shape[:3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n, oh, ow, -1)


def conv2d_forward(x, weights, biases):
    """Valid cross-correlation. ``x`` is (H, W, C) or (N, H, W, C)."""
    x, single = _batched(x, 4)
    weights = np.asarray(weights)
    if weights.ndim != 4:
        raise ShapeError(f"conv weights must be (count, kh, kw, c), got {weights.shape}")
    k, kh, kw, c = weights.shape
    if x.shape[3] != c:
        raise ShapeError(f"input has {x.shape[3]} channels, kernels expect {c}")
    if x.shape[1] < kh or x.shape[2] < kw:
        raise ShapeError(f"input {x.shape[1]}x{x.shape[2]} smaller than kernel {kh}x{kw}")
    if np.shape(biases) != (k,):
        raise ShapeError(f"expected {k} biases, got shape {np.shape(biases)}")
    cols = _im2col(x, kh, kw)
    out = cols @ weights.reshape(k, -1).T + biases
    return out[0] if single else out


def maxpool_forward(x, window, stride):
    x, single = _batched(x, 4)
    n, h, w, c = x.shape
    _check_pool(h, w, window, stride)
    out, _ = _kernels.pool_forward(np.ascontiguousarray(x), stride, False)
    return out[0] if single else out


def fc_forward(x, weights, biases):
    x = np.asarray(x)
    weights = np.asarray(weights)
    single = x.size == weights.shape[1]
    flat = x.reshape(1, -1) if single else x.reshape(x.shape[0], -1)
    if flat.shape[1] != weights.shape[1]:
        raise ShapeError(f"dense layer expects {weights.shape[1]} inputs, got {flat.shape[1]}")
    if np.shape(biases) != (weights.shape[0],):
        raise ShapeError(f"expected {weights.shape[0]} biases, got shape {np.shape(biases)}")
    out = flat @ weights.T + biases
    return out[0] if single else out


def softmax(logits):
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label):
    """Return ``(loss, probabilities)`` for a single logit vector."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} out of range [0, {logits.shape[-1]})")
    z = logits - logits.max()
    log_norm = np.log(np.exp(z).sum())
    return float(log_norm - z[label]), np.exp(z - log_norm)


# ------------------------------------------------------------------- network

class Network:
    """Layer list plus per-layer ``[weights, biases]`` (``None`` for parameter-free layers)."""

    def __init__(self, layers, input_shape=(50, 50, 1), dtype=np.float32):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.shapes = self.shape_trace()
        self.params = [
            [np.zeros(s.weight_shape, self.dtype), np.zeros(s.n_kernels, self.dtype)]
            if s.has_params else None
            for s in self.layers
        ]
        self._cache = None

    @classmethod
    def canonical(cls, n_classes=10, dtype=np.float32):
        return cls(canonical_layers(n_classes), (50, 50, 1), dtype)

    def shape_trace(self):
        shapes = [self.input_shape]
        for spec in self.layers:
            shapes.append(spec.output_shape(shapes[-1]))
        return shapes

    @property
    def param_layers(self):
        return [i for i, s in enumerate(self.layers) if s.has_params]

    @property
    def n_weights(self):
        return sum(self.params[i][0].size for i in self.param_layers)

    @property
    def n_biases(self):
        return sum(self.params[i][1].size for i in self.param_layers)

    def copy(self):
        other = Network(self.layers, self.input_shape, self.dtype)
        other.params = [None if p is None else [p[0].copy(), p[1].copy()] for p in self.params]
        return other

    def astype(self, dtype):
        other = Network(self.layers, self.input_shape, dtype)
        other.params = [None if p is None else [p[0].astype(dtype), p[1].astype(dtype)]
                        for p in self.params]
        return other

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape == self.input_shape[:2] and self.input_shape[2] == 1:
            x = x[..., None]
        if x.shape == self.input_shape:
            return x[None], True
        if x.ndim == 3 and x.shape[1:] == self.input_shape[:2] and self.input_shape[2] == 1:
            x = x[..., None]
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"network expects input {self.input_shape}, got {x.shape}")
        return x, False

    def forward(self, x, train=False):
        """Class probabilities for one input or a batch.

        With ``train=True`` the state needed by :meth:`backward` is kept
        (im2col patches, dense inputs, pool argmax offsets).
        """
        x, single = self._check_input(x)
        cache = [None] * len(self.layers)
        a = x
        fused = False
        for i, (spec, p) in enumerate(zip(self.layers, self.params)):
            if spec.kind == "conv":
                k, kh, kw, _ = p[0].shape
                cols = _im2col(a, kh, kw)
                cache[i] = (cols, a.shape)
                a = cols @ p[0].reshape(k, -1).T + p[1]
            elif spec.kind == "relu":
                nxt = self.layers[i + 1] if i + 1 < len(self.layers) else None
                fused = nxt is not None and nxt.kind == "maxpool"
                if not fused:
                    # max(z, 0) is exactly representable, so the mask can be
                    # recovered from the output
                    a = np.maximum(a, 0)
                    cache[i] = a
            elif spec.kind == "maxpool":
                shape = a.shape
                _check_pool(shape[1], shape[2], spec.window, spec.stride)
                # relu followed by maxpool is computed as one pass
                a, idx = _kernels.pool_forward(np.ascontiguousarray(a), spec.stride, fused)
                cache[i] = (idx, shape)
                fused = False
            elif spec.kind == "fully_connected":
                a = a.reshape(a.shape[0], -1)
                cache[i] = a
                a = a @ p[0].T + p[1]
            else:
                a = softmax(a)
                cache[i] = a
        self._cache = cache if train else None
        return a[0] if single else a

    def loss(self, x, labels):
        probs = self.forward(x)
        probs = probs.reshape(-1, probs.shape[-1])
        labels = np.atleast_1d(labels)
        return float(-np.mean(np.log(probs[np.arange(len(labels)), labels].astype(np.float64))))

    def backward(self, labels, dlogits=None):
        """Gradients of the mean cross-entropy w.r.t. every parameter.

        Needs a preceding ``forward(..., train=True)``. ``dlogits`` replaces
        the loss gradient at the softmax input. Returns a list aligned with
        ``params`` holding ``[dW, db]`` or ``None``.
        """
        if self._cache is None:
            raise RuntimeError("backward() called without a cached forward pass")
        if self.layers[-1].kind != "softmax":
            raise ShapeError("network must end with a softmax layer")
        cache = self._cache
        probs = cache[-1]
        n = probs.shape[0]
        labels = np.atleast_1d(np.asarray(labels))
        if len(labels) != n:
            raise ShapeError(f"{len(labels)} labels for a batch of {n}")
        if dlogits is None:
            if labels.min() < 0 or labels.max() >= probs.shape[1]:
                raise ValueError(f"labels out of range [0, {probs.shape[1]})")
            g = probs.copy()
            g[np.arange(n), labels] -= 1
            g /= n
        else:
            g = np.asarray(dlogits, dtype=self.dtype).reshape(n, -1)
        grads = [None] * len(self.layers)
        first = self.param_layers[0] if self.param_layers else 0
        skip_relu = False
        for i in range(len(self.layers) - 2, first - 1, -1):
            spec, p = self.layers[i], self.params[i]
            if spec.kind == "fully_connected":
                flat = cache[i]
                grads[i] = [g.T @ flat, g.sum(axis=0)]
                if i > first:
                    g = g @ p[0]
            elif spec.kind == "relu":
                if not skip_relu:
                    g = g.reshape(cache[i].shape) * (cache[i] > 0)
                skip_relu = False
            elif spec.kind == "maxpool":
                idx, shape = cache[i]
                g = _kernels.pool_backward(
                    np.ascontiguousarray(g.reshape(idx.shape), dtype=self.dtype),
                    idx, spec.stride, shape[1], shape[2])
                skip_relu = i > 0 and self.layers[i - 1].kind == "relu"
            elif spec.kind == "conv":
                cols, _ = cache[i]
                k, kh, kw, c = p[0].shape
                g2 = g.reshape(-1, k)
                grads[i] = [(g2.T @ cols.reshape(-1, cols.shape[-1])).reshape(p[0].shape),
                            g2.sum(axis=0)]
                if i > first:
                    # input gradient = full correlation of g with the flipped kernels
                    gp = np.pad(g.reshape(cols.shape[:3] + (k,)),
                                ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
                    flipped = p[0][:, ::-1, ::-1, :].transpose(1, 2, 0, 3).reshape(-1, c)
                    g = _im2col(gp, kh, kw) @ flipped
            else:
                raise ShapeError("softmax is only supported as the final layer")
        return grads


# -------------------------------------------------------------- optimisation

class SGD:
    """Momentum SGD: ``v <- momentum*v - lr*g; w <- w + v``, updated in place."""

    def __init__(self, lr=0.01, momentum=0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = None

    def step(self, params, grads):
        params, grads = list(params), list(grads)
        if len(params) != len(grads):
            raise ShapeError("parameter and gradient lists differ in length")
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        for w, g, v in zip(params, grads, self.velocity):
            if w.shape != g.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {w.shape}")
            v *= self.momentum
            v -= self.lr * g
            w += v


def flat_params(net):
    out = []
    for i in net.param_layers:
        out.extend(net.params[i])
    return out


def flat_grads(net, grads):
    out = []
    for i in net.param_layers:
        out.extend(grads[i])
    return out


def sgd_step(net, grads, optimizer):
    optimizer.step(flat_params(net), flat_grads(net, grads))


def xavier_bound(spec):
    k = spec.weight_shape
    if spec.kind == "conv":
        fan_in, fan_out = k[1] * k[2] * k[3], k[0] * k[1] * k[2]
    else:
        fan_in, fan_out = k[1], k[0]
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def xavier_init(net, rng):
    """Glorot-uniform weights, zero biases. ``rng`` is a seed or a numpy Generator."""
    rng = np.random.default_rng(rng)
    for i in net.param_layers:
        spec = net.layers[i]
        bound = xavier_bound(spec)
        net.params[i][0] = rng.uniform(-bound, bound, spec.weight_shape).astype(net.dtype)
        net.params[i][1] = np.zeros(spec.n_kernels, net.dtype)
    return net


# ------------------------------------------------------------------ file I/O

def write_layer_header(fh, layers):
    fh.write(struct.pack("<B", len(layers)))
    for spec in layers:
        fh.write(struct.pack("<B4I", KIND_TAGS[spec.kind], *spec.dims))


def read_layer_header(fh):
    (count,) = struct.unpack("<B", _read(fh, 1))
    tags = {v: k for k, v in KIND_TAGS.items()}
    layers = []
    for _ in range(count):
        tag, *dims = struct.unpack("<B4I", _read(fh, 17))
        if tag not in tags:
            raise ValueError(f"unknown layer tag {tag}")
        layers.append(LayerSpec.from_dims(tags[tag], dims))
    return layers


def _read(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise ValueError("truncated model file")
    return data


def input_shape_for(layers):
    first = layers[0]
    if first.kind != "conv":
        raise ValueError("model must start with a conv layer")
    if layers == canonical_layers(layers[-2].units):
        return (50, 50, 1)
    # files carry no input dims; take the first square input the layers accept
    for side in range(first.kernel_h, 513):
        try:
            Network(layers, (side, side, first.in_channels))
            return (side, side, first.in_channels)
        except ShapeError:
            continue
    raise ValueError("cannot infer input shape from layer list")


def save_float_model(net, path):
    with open(path, "wb") as fh:
        fh.write(FLOAT_MAGIC + struct.pack("<B", FORMAT_VERSION))
        write_layer_header(fh, net.layers)
        for i in net.param_layers:
            w, b = net.params[i]
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_float_model(path) -> Network:
    with open(path, "rb") as fh:
        if _read(fh, 4) != FLOAT_MAGIC:
            raise ValueError(f"{path}: not a float gesture model")
        (version,) = struct.unpack("<B", _read(fh, 1))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        layers = read_layer_header(fh)
        net = Network(layers, input_shape_for(layers))
        for i in net.param_layers:
            spec = layers[i]
            nw = int(np.prod(spec.weight_shape))
            w = np.frombuffer(_read(fh, 4 * nw), "<f4").reshape(spec.weight_shape)
            b = np.frombuffer(_read(fh, 4 * spec.n_kernels), "<f4")
            net.params[i] = [w.astype(np.float32), b.astype(np.float32)]
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after parameters")
    return net


def model_bytes(path):
    return Path(path).stat().st_size

"""Per-kernel weight binarization ``W ~ alpha * B`` and the bit-packed model.

Every conv filter and every dense neuron is one kernel: ``alpha`` is its mean
absolute weight, ``B`` its signs (zero maps to +1). Dense layers are stored
as conv kernels spanning the whole input. Biases stay float.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .nn import (FORMAT_VERSION, Network, ShapeError, _read, input_shape_for,
                 read_layer_header, softmax, write_layer_header)

BINARY_MAGIC = b"HGRB"


@dataclass(frozen=True)
class BinarizedKernel:
    bits: bytes
    scale: float
    n: int

    @property
    def signs(self) -> np.ndarray:
        return unpack_bits(self.bits, self.n)

    def materialize(self, dtype=np.float32) -> np.ndarray:
        return (np.float32(self.scale) * self.signs).astype(dtype)


def pack_bits(signs) -> bytes:
    """Pack a +/-1 vector MSB-first; bit 1 means +1, trailing pad bits are 0."""
    signs = np.asarray(signs).ravel()
    if signs.size == 0:
        raise ValueError("cannot pack an empty sign vector")
    if not np.all(np.abs(signs) == 1):
        raise ValueError("sign vector must contain only +1 and -1")
    return np.packbits(signs > 0, bitorder="big").tobytes()


def unpack_bits(data: bytes, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be at least 1")
    if len(data) != (n + 7) // 8:
        raise ValueError(f"{len(data)} bytes cannot hold exactly {n} bits")
    bits = np.unpackbits(np.frombuffer(data, np.uint8), bitorder="big")
    if bits[n:].any():
        raise ValueError("non-zero padding bits")
    return np.where(bits[:n] == 1, 1, -1).astype(np.int8)


def binarize_kernel(weights) -> BinarizedKernel:
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValueError("cannot binarize an empty kernel")
    signs = np.where(w >= 0, 1, -1)
    return BinarizedKernel(pack_bits(signs), float(np.float32(np.abs(w).mean())), w.size)


def binarization_objective(weights, alpha, signs) -> float:
    """Squared reconstruction error ``||W - alpha*B||^2``."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    b = np.asarray(signs, dtype=np.float64).ravel()
    if w.shape != b.shape:
        raise ValueError(f"length mismatch: {w.size} weights, {b.size} signs")
    return float(np.sum((w - alpha * b) ** 2))


def binarize_weights(w):
    """Vectorised per-kernel ``(alpha, signs)`` for a weight array whose first axis indexes kernels."""
    flat = w.reshape(w.shape[0], -1)
    alpha = np.abs(flat).mean(axis=1, dtype=np.float64).astype(w.dtype)
    signs = np.where(flat >= 0, 1, -1).astype(w.dtype)
    return alpha, signs


def materialize_weights(w):
    """``alpha * B`` for every kernel of ``w``, same shape and dtype."""
    alpha, signs = binarize_weights(w)
    return (alpha[:, None] * signs).reshape(w.shape)


# ------------------------------------------------------------ training step

def binarized_training_step(net, shadow, x, labels, optimizer, xnor_grad=False):
    """One iteration of training with binarized weights.

    ``shadow`` holds the float weights (one array per parameter layer, in
    ``net.param_layers`` order). They are binarized into ``net``, the batch is
    run forward and backward through ``alpha*B``, and the resulting weight
    gradients update ``shadow``. Biases in ``net`` are trained as floats.
    Returns the batch loss.
    """
    layer_ids = net.param_layers
    if len(shadow) != len(layer_ids):
        raise ShapeError(f"{len(shadow)} shadow tensors for {len(layer_ids)} parameter layers")
    for i, w in zip(layer_ids, shadow):
        if w.shape != net.params[i][0].shape:
            raise ShapeError(f"shadow shape {w.shape} does not match layer {i} {net.params[i][0].shape}")
        net.params[i][0] = materialize_weights(w)
    probs = net.forward(x, train=True)
    labels = np.atleast_1d(labels)
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(len(labels)), labels], 1e-30))))
    grads = net.backward(labels)
    params, flat_grads = [], []
    for i, w in zip(layer_ids, shadow):
        gw = grads[i][0]
        if xnor_grad:
            gw = _xnor_weight_grad(w, gw)
        params += [w, net.params[i][1]]
        flat_grads += [gw, grads[i][1]]
    optimizer.step(params, flat_grads)
    return loss


def _xnor_weight_grad(w, g):
    # full chain rule through alpha = mean|W| and sign(W) with the
    # straight-through estimator 1{|w| <= 1}
    k = w.shape[0]
    wf, gf = w.reshape(k, -1), g.reshape(k, -1)
    n = wf.shape[1]
    alpha, signs = binarize_weights(w)
    through_alpha = signs * (gf * signs).sum(axis=1, keepdims=True) / n
    through_sign = alpha[:, None] * gf * (np.abs(wf) <= 1)
    return (through_alpha + through_sign).reshape(w.shape).astype(w.dtype)


# ------------------------------------------------------------- add/sub conv

@njit(cache=True)
def _addsub_conv(x, pos_u, pos_v, pos_c, pos_ptr, neg_u, neg_v, neg_c, neg_ptr,
                 alpha, bias, kh, kw):
    n, h, w, _ = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    k = alpha.shape[0]
    out = np.empty((n, oh, ow, k), np.float64)
    for b in range(n):
        for y in range(oh):
            for xx in range(ow):
                for kk in range(k):
                    acc = 0.0
                    for t in range(pos_ptr[kk], pos_ptr[kk + 1]):
                        acc += x[b, y + pos_u[t], xx + pos_v[t], pos_c[t]]
                    for t in range(neg_ptr[kk], neg_ptr[kk + 1]):
                        acc -= x[b, y + neg_u[t], xx + neg_v[t], neg_c[t]]
                    out[b, y, xx, kk] = alpha[kk] * acc + bias[kk]
    return out


@njit(cache=True)
def direct_conv(x, weights, bias):
    """Multiply-accumulate loop with the same structure as the add/sub path."""
    n, h, w, c = x.shape
    k, kh, kw, _ = weights.shape
    oh, ow = h - kh + 1, w - kw + 1
    out = np.empty((n, oh, ow, k), np.float64)
    for b in range(n):
        for y in range(oh):
            for xx in range(ow):
                for kk in range(k):
                    acc = 0.0
                    for u in range(kh):
                        for v in range(kw):
                            for ch in range(c):
                                acc += x[b, y + u, xx + v, ch] * weights[kk, u, v, ch]
                    out[b, y, xx, kk] = acc + bias[kk]
    return out


class AddSubPlan:
    """Precomputed index lists for convolving with a set of binarized kernels."""

    def __init__(self, kernels, kernel_shape):
        kh, kw, c = kernel_shape
        self.kernel_shape = (kh, kw, c)
        pos_parts, neg_parts = [], []
        for kern in kernels:
            if kern.n != kh * kw * c:
                raise ShapeError(f"kernel of {kern.n} weights does not fit shape {kernel_shape}")
            s = kern.signs
            pos_parts.append(np.flatnonzero(s > 0))
            neg_parts.append(np.flatnonzero(s < 0))
        self.pos = self._unravel(pos_parts)
        self.neg = self._unravel(neg_parts)
        self.alpha = np.array([kern.scale for kern in kernels], np.float64)

    def _unravel(self, parts):
        ptr = np.zeros(len(parts) + 1, np.int64)
        ptr[1:] = np.cumsum([len(p) for p in parts])
        flat = np.concatenate(parts) if parts else np.zeros(0, np.int64)
        u, v, c = np.unravel_index(flat, self.kernel_shape)
        return u.astype(np.int64), v.astype(np.int64), c.astype(np.int64), ptr

    def __call__(self, x, bias):
        kh, kw, c = self.kernel_shape
        x, single = (x[None], True) if x.ndim == 3 else (x, False)
        if x.shape[3] != c:
            raise ShapeError(f"input has {x.shape[3]} channels, kernels expect {c}")
        if x.shape[1] < kh or x.shape[2] < kw:
            raise ShapeError(f"input {x.shape[1]}x{x.shape[2]} smaller than kernel {kh}x{kw}")
        bias = np.asarray(bias, np.float64)
        if bias.shape != self.alpha.shape:
            raise ShapeError(f"expected {self.alpha.size} biases, got {bias.shape}")
        out = _addsub_conv(np.ascontiguousarray(x), *self.pos, *self.neg, self.alpha, bias, kh, kw)
        out = out.astype(x.dtype if x.dtype.kind == "f" else np.float32)
        return out[0] if single else out


def binarized_conv_forward(x, kernels, bias, kernel_shape=None):
    """Valid convolution using only additions/subtractions per window.

    ``kernels`` is one :class:`BinarizedKernel` or a list of them; the window
    shape defaults to ``(kh, kw, c)`` inferred from a square kernel over the
    input channels.
    """
    x = np.asarray(x)
    if isinstance(kernels, BinarizedKernel):
        kernels = [kernels]
    bias = np.atleast_1d(bias)
    if kernel_shape is None:
        c = x.shape[-1]
        side = int(round(np.sqrt(kernels[0].n // c)))
        if side * side * c != kernels[0].n:
            raise ShapeError("kernel_shape is required for non-square kernels")
        kernel_shape = (side, side, c)
    return AddSubPlan(kernels, kernel_shape)(x, bias)


# ----------------------------------------------------------------- model

@dataclass
class BinarizedModel:
    layers: list
    kernels: list  # per layer: list[BinarizedKernel] or None
    biases: list  # per layer: float32 vector or None
    input_shape: tuple = (50, 50, 1)
    _plans: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def param_layers(self):
        return [i for i, s in enumerate(self.layers) if s.has_params]

    @property
    def n_kernels(self):
        return sum(len(self.kernels[i]) for i in self.param_layers)

    def weight_bytes(self):
        return sum(len(k.bits) for i in self.param_layers for k in self.kernels[i])

    def scale_bytes(self):
        return 4 * self.n_kernels

    def materialize(self, dtype=np.float32) -> Network:
        """Float network whose weights are exactly ``alpha * B``."""
        net = Network(self.layers, self.input_shape, dtype)
        for i in self.param_layers:
            shape = self.layers[i].weight_shape
            w = np.stack([k.materialize(dtype) for k in self.kernels[i]]).reshape(shape)
            net.params[i] = [w, np.asarray(self.biases[i], dtype).copy()]
        return net

    def _plan(self, i, in_shape):
        if i not in self._plans:
            spec = self.layers[i]
            shape = spec.weight_shape[1:] if spec.kind == "conv" else tuple(in_shape)
            self._plans[i] = AddSubPlan(self.kernels[i], shape)
        return self._plans[i]

    def predict_proba(self, x):
        """Inference through the add/sub path. ``x`` is one mask or a batch."""
        x = np.asarray(x, np.float32)
        single = x.ndim == 2 or x.shape == self.input_shape
        if x.ndim == 2:
            x = x[None, ..., None]
        elif single:
            x = x[None]
        elif x.ndim == 3:
            x = x[..., None]
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"model expects input {self.input_shape}, got {x.shape[1:]}")
        a = x
        for i, spec in enumerate(self.layers):
            if spec.kind in ("conv", "fully_connected"):
                if a.ndim == 2:
                    a = a[:, None, None, :]
                in_shape = a.shape[1:]
                a = self._plan(i, in_shape)(a, self.biases[i])
                if spec.kind == "fully_connected":
                    a = a.reshape(a.shape[0], -1)
            elif spec.kind == "relu":
                a = np.maximum(a, 0)
            elif spec.kind == "maxpool":
                n, h, w, c = a.shape
                s = spec.stride
                a = a.reshape(n, h // s, s, w // s, s, c).max(axis=(2, 4))
            else:
                a = softmax(a)
        return a[0] if single else a


def binarize_model(net: Network) -> BinarizedModel:
    kernels, biases = [], []
    for spec, p in zip(net.layers, net.params):
        if p is None:
            kernels.append(None)
            biases.append(None)
            continue
        w = p[0].reshape(p[0].shape[0], -1)
        kernels.append([binarize_kernel(row) for row in w])
        biases.append(np.asarray(p[1], np.float32).copy())
    return BinarizedModel(list(net.layers), kernels, biases, net.input_shape)


def save_binarized_model(model: BinarizedModel, path):
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC + struct.pack("<B", FORMAT_VERSION))
        write_layer_header(fh, model.layers)
        for i in model.param_layers:
            for k in model.kernels[i]:
                fh.write(struct.pack("<I", k.n))
                fh.write(k.bits)
                fh.write(struct.pack("<f", k.scale))
            fh.write(np.ascontiguousarray(model.biases[i], dtype="<f4").tobytes())


def load_binarized_model(path) -> BinarizedModel:
    with open(path, "rb") as fh:
        if _read(fh, 4) != BINARY_MAGIC:
            raise ValueError(f"{path}: not a binarized gesture model")
        (version,) = struct.unpack("<B", _read(fh, 1))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        layers = read_layer_header(fh)
        kernels, biases = [], []
        for spec in layers:
            if not spec.has_params:
                kernels.append(None)
                biases.append(None)
                continue
            expected = int(np.prod(spec.weight_shape[1:]))
            row = []
            for _ in range(spec.n_kernels):
                (n,) = struct.unpack("<I", _read(fh, 4))
                if n != expected:
                    raise ValueError(f"{path}: kernel of {n} weights, layer expects {expected}")
                bits = _read(fh, (n + 7) // 8)
                (scale,) = struct.unpack("<f", _read(fh, 4))
                row.append(BinarizedKernel(bits, scale, n))
            kernels.append(row)
            biases.append(np.frombuffer(_read(fh, 4 * spec.n_kernels), "<f4").astype(np.float32))
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after parameters")
    return BinarizedModel(layers, kernels, biases, input_shape_for(layers))


def storage_report(layers):
    """Byte counts for the float and binarized encodings of a layer list."""
    float_weights = bits = scales = biases = n_weights = 0
    for spec in layers:
        if not spec.has_params:
            continue
        k = spec.n_kernels
        n = int(np.prod(spec.weight_shape[1:]))
        n_weights += k * n
        float_weights += 4 * k * n
        bits += k * ((n + 7) // 8)
        scales += 4 * k
        biases += 4 * k
    return {
        "n_weights": n_weights,
        "float_weight_bytes": float_weights,
        "packed_bit_bytes": bits,
        "scale_bytes": scales,
        "bias_bytes": biases,
        "bit_ratio": 8 * float_weights / n_weights,
        "weight_ratio": float_weights / (bits + scales),
    }

"""scikit-learn style wrappers around the segmentation pipeline and the CNN."""
from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .binary import (binarize_model, binarized_training_step, materialize_weights,
                     save_binarized_model)
from .nn import SGD, Network, save_float_model, sgd_step, xavier_init
from .segmentation import SegmentationParams, segment_full_resolution, segment_hand

log = logging.getLogger(__name__)

MODES = ("float", "binarized")


class TrainingDivergedError(FloatingPointError):
    pass


def check_masks(X, size=50):
    """Coerce masks to float32 (n, size, size, 1); values must be finite."""
    X = np.asarray(X)
    if X.ndim == 4 and X.shape[-1] == 1:
        X = X[..., 0]
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1:] != (size, size):
        raise ValueError(f"expected masks of shape (n, {size}, {size}), got {X.shape}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("masks contain NaN or infinite values")
    return X[..., None]


class HandSegmenter(TransformerMixin, BaseEstimator):
    """Depth maps -> binary hand masks (50x50 unless ``full_resolution``)."""

    def __init__(self, depth_alpha=3, full_resolution=False):
        self.depth_alpha = depth_alpha
        self.full_resolution = full_resolution

    def fit(self, X=None, y=None):
        self.params_ = SegmentationParams(depth_alpha=self.depth_alpha)
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        segment = segment_full_resolution if self.full_resolution else segment_hand
        masks = [segment(np.asarray(d), self.params_) for d in X]
        return masks if self.full_resolution else np.stack(masks)


class GestureNetClassifier(ClassifierMixin, BaseEstimator):
    """The 50x50 gesture CNN trained with momentum SGD.

    ``mode="binarized"`` trains with per-iteration weight binarization: a
    float copy of the weights is kept only during ``fit``; afterwards the
    model holds ``alpha*B`` weights and ``binarized_`` carries the packed form.
    With ``float_epochs=k`` the first k epochs train plain float weights and
    binarization starts from them; the learning-rate schedule runs on unchanged.
    """

    def __init__(self, mode="float", epochs=30, batch_size=32, lr=0.01, momentum=0.9,
                 lr_decay=1.0, random_state=0, xnor_grad=False, float_epochs=0, verbose=False):
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.lr_decay = lr_decay
        self.random_state = random_state
        self.xnor_grad = xnor_grad
        self.float_epochs = float_epochs
        self.verbose = verbose

    def fit(self, X, y):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.random_state is None:
            raise ValueError("random_state is required")
        warm = self.float_epochs if self.mode == "binarized" else 0
        if warm < 0 or (warm and warm >= self.epochs):
            raise ValueError(f"float_epochs must lie in [0, epochs), got {self.float_epochs}")
        X = check_masks(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} masks but {len(y)} labels")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        rng = np.random.default_rng(self.random_state)
        net = Network.canonical(max(len(self.classes_), 2))
        xavier_init(net, rng)
        opt = SGD(self.lr, self.momentum)
        shadow = None
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            binarize = self.mode == "binarized" and epoch >= warm
            if binarize and shadow is None:
                shadow = [net.params[i][0].copy() for i in net.param_layers]
                if epoch:
                    opt.velocity = None
            opt.lr = self.lr * self.lr_decay ** epoch
            order = rng.permutation(len(X))
            total = 0.0
            for start in range(0, len(X), self.batch_size):
                idx = order[start:start + self.batch_size]
                if not binarize:
                    probs = net.forward(X[idx], train=True)
                    loss = -np.log(np.maximum(probs[np.arange(len(idx)), y_idx[idx]], 1e-30)).mean()
                    sgd_step(net, net.backward(y_idx[idx]), opt)
                else:
                    loss = binarized_training_step(net, shadow, X[idx], y_idx[idx], opt,
                                                   xnor_grad=self.xnor_grad)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(f"loss became {loss} in epoch {epoch + 1}")
                total += float(loss) * len(idx)
            self.loss_curve_.append(total / len(X))
            if self.verbose:
                log.info("epoch %d loss %.6f", epoch + 1, self.loss_curve_[-1])
        if self.mode == "binarized":
            if shadow is None:
                shadow = [net.params[i][0].copy() for i in net.param_layers]
            for i, w in zip(net.param_layers, shadow):
                net.params[i][0] = materialize_weights(w)
            self.binarized_ = binarize_model(net)
        net._cache = None
        self.network_ = net
        return self

    def predict_proba(self, X, chunk=256):
        check_is_fitted(self, "network_")
        X = check_masks(X)
        out = [self.network_.forward(X[i:i + chunk]) for i in range(0, len(X), chunk)]
        return np.concatenate(out) if out else np.zeros((0, len(self.classes_)), np.float32)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def save(self, path):
        """Write ``.hgm`` (float mode) or ``.hgb`` (binarized mode)."""
        check_is_fitted(self, "network_")
        if self.mode == "binarized":
            save_binarized_model(self.binarized_, path)
        else:
            save_float_model(self.network_, path)

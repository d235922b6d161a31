"""scikit-learn compatible front end.

``PydMobileNetClassifier`` trains one of the residual-network variants on
uint8 images shaped ``(n, 3, 32, 32)`` (or flattened ``(n, 3072)``) and
exposes the usual ``fit`` / ``predict`` / ``predict_proba`` / ``score`` API,
so it can sit inside pipelines and model-selection utilities.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from .data import IMAGE_SHAPE, BatchIterator, Normalizer
from .models import NetworkConfig, blocks_from_depth, build_network
from .ops import log_softmax
from .tensor import make_rng
from .train import TrainConfig, Trainer, predict_logits


def check_images(X) -> np.ndarray:
    """Coerce to a uint8 (n, 3, 32, 32) array."""
    X = np.asarray(X)
    if X.ndim == 2 and X.shape[1] == int(np.prod(IMAGE_SHAPE)):
        X = X.reshape(-1, *IMAGE_SHAPE)
    if X.ndim != 4 or X.shape[1:] != IMAGE_SHAPE:
        raise ValueError(f"expected images of shape (n, 3, 32, 32) or (n, 3072), got {X.shape}")
    if X.dtype != np.uint8:
        if np.issubdtype(X.dtype, np.floating) and not np.all(np.isfinite(X)):
            raise ValueError("images contain NaN or infinity")
        if X.size and (X.min() < 0 or X.max() > 255):
            raise ValueError("pixel values must lie in [0, 255]")
        X = X.astype(np.uint8)
    return X


class ChannelNormalizer(TransformerMixin, BaseEstimator):
    """Per-channel standardization of uint8 images to float32."""

    def fit(self, X, y=None):
        X = check_images(X)
        self.normalizer_ = Normalizer.fit(X)
        self.mean_ = self.normalizer_.mean
        self.std_ = self.normalizer_.std
        return self

    def transform(self, X):
        check_is_fitted(self, "normalizer_")
        return self.normalizer_(check_images(X))

    def inverse_transform(self, X):
        check_is_fitted(self, "normalizer_")
        return self.normalizer_.denormalize(X)


class PydMobileNetClassifier(ClassifierMixin, BaseEstimator):
    """Residual CIFAR-style classifier with standard, depthwise or pyramid blocks.

    Parameters mirror :class:`~pydmobilenet.train.TrainConfig` plus the
    architecture: ``kind`` is one of ``"std"``, ``"dw"``, ``"pyd_add"``,
    ``"pyd_concat"``; ``depth`` must be ``2 + 9 * blocks_per_stage``.
    """

    def __init__(self, kind="pyd_concat", depth=29, alpha=0.25, stage_channels=(32, 64, 128),
                 kernels=(3, 5, 7), epochs=320, base_lr=0.1, lr_drops=(150, 225),
                 momentum=0.9, weight_decay=1e-4, batch_size=128, augment=True, mixup=False,
                 seed=0, record_time=True):
        self.kind = kind
        self.depth = depth
        self.alpha = alpha
        self.stage_channels = stage_channels
        self.kernels = kernels
        self.epochs = epochs
        self.base_lr = base_lr
        self.lr_drops = lr_drops
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.augment = augment
        self.mixup = mixup
        self.seed = seed
        self.record_time = record_time

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, base_lr=self.base_lr, lr_drops=tuple(self.lr_drops),
                           momentum=self.momentum, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, seed=self.seed, augment=self.augment,
                           mixup=self.mixup, record_time=self.record_time)

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X)
        y = np.asarray(y)
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        self.n_features_in_ = int(np.prod(IMAGE_SHAPE))
        targets = self._encoder.transform(y)
        cfg = self._train_config()
        self.network_config_ = NetworkConfig(self.kind, blocks_from_depth(self.depth), self.alpha,
                                             max(len(self.classes_), 2), tuple(self.stage_channels),
                                             tuple(self.kernels))
        self.normalizer_ = Normalizer.fit(X)
        self.model_ = build_network(self.network_config_, make_rng(cfg.seed, 0))
        train = BatchIterator(X, targets, self.normalizer_, min(cfg.batch_size, len(X)),
                              train=True, augment=cfg.augment, seed=cfg.seed)
        val = None
        if X_val is not None:
            val = BatchIterator(check_images(X_val), self._encoder.transform(np.asarray(y_val)),
                                self.normalizer_, cfg.batch_size, train=False)
        self.trainer_ = Trainer(self.model_, cfg, train, val)
        self.history_ = self.trainer_.run()
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X)
        batches = BatchIterator(X, np.zeros(len(X), dtype=np.int64), self.normalizer_,
                                self.batch_size, train=False)
        return predict_logits(self.model_, batches)

    def decision_function(self, X) -> np.ndarray:
        logits = self._logits(X)
        return logits[:, :len(self.classes_)]

    def predict_proba(self, X) -> np.ndarray:
        return np.exp(log_softmax(self.decision_function(X).astype(np.float64)))

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    @property
    def model_name_(self) -> str:
        check_is_fitted(self, "model_")
        return self.network_config_.name

"""Scikit-learn style wrapper around the trainer.

X is an array of images with shape (n_samples, channels, H, W); y is the
matching stack of integer label maps (n_samples, H, W). fit() trains the
memory-augmented model, predict() returns per-pixel labels, score() is mIoU.
"""

from __future__ import annotations

import tempfile

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .numerics import Tensor
from .synthdata import SegSample
from .trainer import TrainConfig, confusion_matrix, iou_from_confusion, predict_labels, train


class MemorySegmenter(BaseEstimator):
    """Pixel classifier with a dataset-level feature memory."""

    def __init__(self, num_classes=5, epochs=10, batch_size=8, base_lr=0.1,
                 weight_decay=1e-4, alpha=0.4, beta=1.0, m0=0.9,
                 momentum_power=0.9, fusion_mode="concat", dim=16,
                 backbone_widths=(16,), stride=1, use_cosine=True,
                 use_poly_schedule=True, clustering_init=False, use_rcl=True,
                 use_within_image=False, use_memory=True, seed=0):
        self.num_classes = num_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.alpha = alpha
        self.beta = beta
        self.m0 = m0
        self.momentum_power = momentum_power
        self.fusion_mode = fusion_mode
        self.dim = dim
        self.backbone_widths = backbone_widths
        self.stride = stride
        self.use_cosine = use_cosine
        self.use_poly_schedule = use_poly_schedule
        self.clustering_init = clustering_init
        self.use_rcl = use_rcl
        self.use_within_image = use_within_image
        self.use_memory = use_memory
        self.seed = seed

    def _validate(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4:
            raise ValueError(f"X must be (n, channels, H, W), got shape {X.shape}")
        if y is not None:
            y = np.asarray(y)
            if y.shape != (X.shape[0], X.shape[2], X.shape[3]):
                raise ValueError(f"y shape {y.shape} does not match X {X.shape}")
        return X, y

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, base_lr=self.base_lr,
            weight_decay=self.weight_decay, alpha=self.alpha, beta=self.beta,
            m0=self.m0, momentum_power=self.momentum_power,
            fusion_mode=self.fusion_mode, num_classes=self.num_classes,
            dim=self.dim, backbone_widths=tuple(self.backbone_widths),
            stride=self.stride, use_cosine=self.use_cosine,
            use_poly_schedule=self.use_poly_schedule,
            clustering_init=self.clustering_init, use_rcl=self.use_rcl,
            use_within_image=self.use_within_image, seed=self.seed,
        )

    def fit(self, X, y):
        X, y = self._validate(X, y)
        samples = [SegSample(image=img, gt=gt.astype(np.int64))
                   for img, gt in zip(X, y)]
        with tempfile.TemporaryDirectory() as tmp:
            self.model_ = train(self._train_config(), samples, tmp,
                                use_memory=self.use_memory)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X, _ = self._validate(X)
        return np.stack([
            predict_labels(self.model_, SegSample(image=img, gt=np.zeros(img.shape[1:], dtype=np.int64)))
            for img in X
        ])

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X, _ = self._validate(X)
        dtype = self.model_.cfg.dtype
        return np.stack([
            self.model_.forward(Tensor(img.astype(dtype)))["o"].data for img in X
        ])

    def score(self, X, y):
        """Mean intersection-over-union across classes."""
        check_is_fitted(self, "model_")
        X, y = self._validate(X, y)
        conf = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        for pred, gt in zip(self.predict(X), y):
            conf += confusion_matrix(pred, gt.astype(np.int64), self.num_classes)
        miou, _ = iou_from_confusion(conf)
        return miou

"""scikit-learn style wrapper around the training engine."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_labels, check_masks, check_pair
from .engine import Models, OptimConfig, StrategyConfig, fit as fit_engine
from .metrics import psnr
from .models import classifier_config, enhancer_config, predict, segmenter_config
from .synthdata import Dataset, DegradeConfig, SceneConfig


class GradPromEnhancer(TransformerMixin, BaseEstimator):
    """Image enhancer trained with an auxiliary recognizer.

    ``fit(X, y)`` takes degraded images ``X`` and clean targets ``y``; if ``y``
    is larger than ``X`` by an integer factor the model is trained for
    super-resolution. ``transform`` returns enhanced images and ``predict``
    returns the recognizer's logits on them.

    Parameters
    ----------
    strategy : {"gradprom", "joint", "frozen", "none"}
    gate_mode : {"hard", "cosine"}
    supervision : {"supervised", "unsupervised"}
    lam : float
        Weight of the recognition loss gradient.
    recognizer : {"classifier", "segmenter", "both"}
    """

    def __init__(self, strategy="gradprom", gate_mode="hard", supervision="supervised", lam=1e-4,
                 recognizer="classifier", n_classes=3, seg_classes=2, channels=16, depth=3,
                 recognizer_channels=16, epochs=10, warmup_epochs=1, vr_pretrain_epochs=2,
                 lr=1e-4, pretrain_lr=1e-3, batch_size=8, augment=False, random_state=0):
        self.strategy = strategy
        self.gate_mode = gate_mode
        self.supervision = supervision
        self.lam = lam
        self.recognizer = recognizer
        self.n_classes = n_classes
        self.seg_classes = seg_classes
        self.channels = channels
        self.depth = depth
        self.recognizer_channels = recognizer_channels
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.vr_pretrain_epochs = vr_pretrain_epochs
        self.lr = lr
        self.pretrain_lr = pretrain_lr
        self.batch_size = batch_size
        self.augment = augment
        self.random_state = random_state

    def _recognizer_configs(self, c):
        out = []
        if self.recognizer in ("classifier", "both"):
            out.append(classifier_config(self.n_classes, self.recognizer_channels, c))
        if self.recognizer in ("segmenter", "both"):
            out.append(segmenter_config(self.seg_classes, self.recognizer_channels, c))
        if not out:
            raise ValueError(f"unknown recognizer {self.recognizer!r}")
        return tuple(out)

    def fit(self, X, y, labels=None, masks=None):
        if self.strategy == "recognizer_only":
            raise ValueError("recognizer_only trains no enhancer; use the harness instead")
        X, y, factor = check_pair(X, y)
        n, c, h, w = y.shape
        strategy = StrategyConfig(strategy=self.strategy, gate_mode=self.gate_mode,
                                  supervision=self.supervision, lam=self.lam,
                                  warmup_epochs=self.warmup_epochs,
                                  vr_pretrain_epochs=self.vr_pretrain_epochs)
        recogs = self._recognizer_configs(c)
        needs_targets = strategy.uses_recognizer_loss or self.vr_pretrain_epochs > 0
        roles = {r.role for r in recogs}
        if labels is None:
            if needs_targets and "classifier" in roles:
                raise ValueError("labels are required to train a classifier recognizer")
            labels = np.zeros(n, dtype=np.int64)
        if masks is None:
            if needs_targets and "segmenter" in roles:
                raise ValueError("masks are required to train a segmenter recognizer")
            masks = np.zeros((n, h, w), dtype=np.int64)
        labels = check_labels(labels, n, self.n_classes)
        masks = check_masks(masks, (n, h, w), self.seg_classes)

        enh = enhancer_config("sr" if factor > 1 else "denoise", channels=self.channels,
                              depth=self.depth, in_channels=c, factor=max(2, factor))
        models = Models(enh, recogs)
        split = lambda a: {"train": a, "eval": a[:1]}
        data = Dataset(clean=split(y), degraded=split(X), labels=split(labels), masks=split(masks),
                       seeds={"train": list(range(n)), "eval": [0]}, dataset_seed=0,
                       scene=SceneConfig(height=h, width=w, channels=c), degradation=DegradeConfig())
        optim = OptimConfig(lr=self.lr, batch_size=self.batch_size, pretrain_lr=self.pretrain_lr)
        state, records = fit_engine(data, models, strategy, optim, self.epochs, self.random_state,
                                    augment_enabled=self.augment)
        self.models_ = models
        self.state_ = state
        self.step_records_ = records
        self.scale_factor_ = factor
        self.n_channels_ = c
        return self

    def transform(self, X):
        check_is_fitted(self, "state_")
        X = check_images(X)
        if X.shape[1] != self.n_channels_:
            raise ValueError(f"expected {self.n_channels_} channels, got {X.shape[1]}")
        return np.clip(predict(self.state_.theta, X, self.models_.enhancer), 0.0, 1.0)

    def predict(self, X):
        """Logits of the first recognizer on the enhanced images."""
        return self.predict_all(X)[0]

    def predict_all(self, X):
        enhanced = self.transform(X)
        return [predict(phi, enhanced, cfg)
                for phi, cfg in zip(self.state_.phi, self.models_.recognizers)]

    def score(self, X, y):
        """Mean PSNR (dB) of the enhanced images against ``y``."""
        enhanced = self.transform(X)
        y = check_images(y, "y")
        return float(np.mean([psnr(e, t) for e, t in zip(enhanced, y)]))

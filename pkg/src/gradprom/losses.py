"""Training losses built from autodiff primitives."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import ModelConfig, recognizer_forward


def pixel_loss(kind: str, pred: Tensor, target) -> Tensor:
    """Mean squared (``mse``) or mean absolute (``l1``) error over all elements."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"pixel_loss: {pred.shape} vs {target.shape}")
    diff = ad.sub(pred, target)
    if kind == "mse":
        return ad.mean(ad.mul(diff, diff))
    if kind == "l1":
        return ad.mean(ad.absolute(diff))
    raise ValueError(f"unknown pixel loss {kind!r}")


def _one_hot(labels: np.ndarray, n_classes: int, axis: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu":
        if not np.all(labels == np.round(labels)):
            raise ValueError("class targets must be integers")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"class target out of range [0, {n_classes})")
    eye = np.eye(n_classes)[labels]
    return np.moveaxis(eye, -1, axis)


def ce_loss(kind: str, logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood.

    ``image_level``: logits ``[N x C]``, integer labels ``[N]``.
    ``pixel_level``: logits ``[N x K x H x W]``, integer masks ``[N x H x W]``.
    """
    if kind == "image_level":
        if logits.data.ndim != 2:
            raise ad.ShapeError("image-level logits must be N x C")
        logp = ad.log_softmax(logits, axis=-1)
        onehot = _one_hot(target, logits.shape[1], axis=-1)
        count = logits.shape[0]
    elif kind == "pixel_level":
        if logits.data.ndim != 4:
            raise ad.ShapeError("pixel-level logits must be N x K x H x W")
        logp = ad.log_softmax(logits, axis=1)
        onehot = _one_hot(target, logits.shape[1], axis=1)
        count = logits.shape[0] * logits.shape[2] * logits.shape[3]
    else:
        raise ValueError(f"unknown cross-entropy kind {kind!r}")
    if onehot.shape != logits.shape:
        raise ad.ShapeError(f"targets {np.shape(target)} do not match logits {logits.shape}")
    return ad.scale(ad.sum_all(ad.mul(logp, onehot)), -1.0 / count)


def supervised_vr_loss(logits: Tensor, target, cfg: ModelConfig) -> Tensor:
    kind = "image_level" if cfg.role == "classifier" else "pixel_level"
    return ce_loss(kind, logits, target)


def unsup_vr_loss(vr_params: Mapping[str, Tensor], enhanced: Tensor, clean, cfg: ModelConfig) -> Tensor:
    """MSE between recognizer outputs on enhanced and clean images.

    The clean branch is a constant target: no gradient reaches it.
    """
    clean = clean if isinstance(clean, Tensor) else Tensor(clean)
    if enhanced.shape != clean.shape:
        raise ad.ShapeError(f"unsup_vr_loss: {enhanced.shape} vs {clean.shape}")
    z_enh = recognizer_forward(vr_params, enhanced, cfg)
    z_clean = ad.detach(recognizer_forward(vr_params, clean, cfg))
    return pixel_loss("mse", z_enh, z_clean)

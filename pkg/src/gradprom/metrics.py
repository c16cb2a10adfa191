"""Evaluation metrics on plain arrays: PSNR, SSIM, accuracy, mIoU."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
_MSE_FLOOR = 10.0 ** (-9.9)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricsRecord:
    psnr: float
    ssim: float
    accuracy: float = float("nan")
    miou: float = float("nan")
    n_samples: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def _pair(pred, target):
    pred = np.clip(np.asarray(pred, dtype=np.float64), 0.0, 1.0)
    target = np.clip(np.asarray(target, dtype=np.float64), 0.0, 1.0)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return pred, target


def psnr(pred, target) -> float:
    """PSNR in dB with peak 1.0, capped at 99 dB."""
    pred, target = _pair(pred, target)
    mse = float(np.mean((pred - target) ** 2))
    if mse < _MSE_FLOOR:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window() -> np.ndarray:
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-(x ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return w / w.sum()


def _filter(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    return correlate1d(correlate1d(img, w, axis=0, mode="reflect"), w, axis=1, mode="reflect")


def ssim_map(pred, target) -> np.ndarray:
    """Per-pixel SSIM of two single-channel images."""
    x, y = _pair(pred, target)
    if x.ndim != 2:
        raise ValueError("ssim_map expects a 2-D image")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = _gaussian_window()
    c1, c2 = (SSIM_K1 * 1.0) ** 2, (SSIM_K2 * 1.0) ** 2
    mx, my = _filter(x, w), _filter(y, w)
    sxx = _filter(x * x, w) - mx * mx
    syy = _filter(y * y, w) - my * my
    sxy = _filter(x * y, w) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(pred, target) -> float:
    """Mean SSIM; images are ``H x W`` or ``C x H x W`` (channels averaged)."""
    x, y = _pair(pred, target)
    if x.ndim == 2:
        return float(ssim_map(x, y).mean())
    if x.ndim == 3:
        return float(np.mean([ssim_map(x[c], y[c]).mean() for c in range(x.shape[0])]))
    raise ValueError(f"ssim expects H x W or C x H x W, got {x.shape}")


def _argmax(logits: np.ndarray, axis: int) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(logits, axis=axis)


def accuracy(logits, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0] or logits.shape[0] < 1:
        raise ValueError("accuracy expects N x C logits and N labels, N >= 1")
    return float(np.mean(_argmax(logits, 1) == labels))


def confusion(pred_logits, masks, n_classes: int | None = None) -> np.ndarray:
    """Global confusion counts ``[true, predicted]`` from N x K x H x W logits."""
    pred_logits = np.asarray(pred_logits)
    k = pred_logits.shape[1] if n_classes is None else n_classes
    pred = _argmax(pred_logits, 1).reshape(-1)
    true = np.asarray(masks).astype(np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError("masks do not match prediction size")
    return np.bincount(true * k + pred, minlength=k * k).reshape(k, k)


def miou_from_confusion(cm: np.ndarray) -> float:
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    # a class absent from both prediction and ground truth scores 1
    iou = np.where(union > 0, tp / np.maximum(union, 1), 1.0)
    return float(iou.mean())


def miou(pred_logits, masks) -> float:
    """Macro mIoU over classes (background included) from global counts."""
    pred_logits = np.asarray(pred_logits)
    if pred_logits.ndim != 4 or pred_logits.shape[1] < 2:
        raise ValueError("miou expects N x K x H x W logits with K >= 2")
    return miou_from_confusion(confusion(pred_logits, masks))

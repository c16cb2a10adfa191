"""Synthetic lesion-like scenes, degradations, augmentation and datasets.

Every sample is a pure function of ``(dataset_seed, split, index)``.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

_MASK64 = (1 << 64) - 1
SPLIT_TAGS = {"train": 0x7452_4149_4E00_0001, "eval": 0x4556_414C_0000_0002}


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def splitmix(dataset_seed: int, split_tag: str | int, index: int) -> int:
    """Per-sample seed from (dataset seed, split, index)."""
    tag = SPLIT_TAGS[split_tag] if isinstance(split_tag, str) else int(split_tag)
    return splitmix64(splitmix64((int(dataset_seed) & _MASK64) ^ tag) ^ int(index))


def rng_for(*keys: int) -> np.random.Generator:
    """Generator seeded from a tuple of integers."""
    return np.random.default_rng([int(k) & _MASK64 for k in keys])


# ------------------------------------------------------------------ scenes

@dataclass(frozen=True)
class SceneConfig:
    height: int = 32
    width: int = 32
    channels: int = 1
    min_blobs: int = 1
    max_blobs: int = 3
    blob_axis_range: tuple[float, float] = (2.5, 5.5)
    blob_intensity_range: tuple[float, float] = (0.6, 0.95)
    background_range: tuple[float, float] = (0.2, 0.5)
    background_grid: int = 4

    def __post_init__(self):
        if self.min_blobs < 1 or self.max_blobs < self.min_blobs:
            raise ValueError("invalid blob count range")
        if self.height < 8 or self.width < 8:
            raise ValueError("scenes must be at least 8x8")


def scene_distribution(name: str = "A", **overrides) -> SceneConfig:
    """Named scene families; B has a rougher background and dimmer blobs."""
    if name == "A":
        base = {}
    elif name == "B":
        base = dict(background_grid=8, background_range=(0.15, 0.45),
                    blob_intensity_range=(0.5, 0.8))
    else:
        raise ValueError(f"unknown scene distribution {name!r}")
    base.update(overrides)
    return SceneConfig(**base)


def _background(rng, cfg: SceneConfig) -> np.ndarray:
    g = cfg.background_grid
    lo, hi = cfg.background_range
    grid = rng.uniform(lo, hi, size=(g, g))
    # bilinear upsampling with pixel-centre alignment stays inside [lo, hi]
    ys = (np.arange(cfg.height) + 0.5) * g / cfg.height - 0.5
    xs = (np.arange(cfg.width) + 0.5) * g / cfg.width - 0.5
    yy, xx = np.meshgrid(np.clip(ys, 0, g - 1), np.clip(xs, 0, g - 1), indexing="ij")
    return ndimage.map_coordinates(grid, [yy, xx], order=1, mode="nearest")


def _place_blobs(rng, cfg: SceneConfig, count: int):
    lo, hi = cfg.blob_axis_range
    blobs = []
    attempts = 0
    while len(blobs) < count:
        attempts += 1
        if attempts > 2000:
            # restart placement; practically never reached at default sizes
            blobs, attempts = [], 0
        a, b = rng.uniform(lo, hi, size=2)
        r = max(a, b)
        margin = r + 1.5
        if 2 * margin >= min(cfg.height, cfg.width):
            raise ValueError("blob axes too large for the scene")
        cy = rng.uniform(margin, cfg.height - margin)
        cx = rng.uniform(margin, cfg.width - margin)
        theta = rng.uniform(0.0, np.pi)
        if all(np.hypot(cy - y, cx - x) > r + rr + 3.0 for y, x, _, _, _, rr in blobs):
            blobs.append((cy, cx, a, b, theta, r))
    return blobs


def _coverage(cfg: SceneConfig, cy, cx, a, b, theta) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(cfg.height) + 0.5, np.arange(cfg.width) + 0.5, indexing="ij")
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    grad = np.sqrt((u / a ** 2) ** 2 + (v / b ** 2) ** 2) / np.maximum(r, 1e-12)
    signed = (r - 1.0) / np.maximum(grad, 1e-12)
    return np.clip(0.5 - signed, 0.0, 1.0)


def generate_scene(sample_seed: int, cfg: SceneConfig = SceneConfig()):
    """Return ``(clean [C x H x W], label, mask [H x W])``.

    ``label`` is the blob count minus one and ``mask`` marks pixels with at
    least half blob coverage.
    """
    rng = rng_for(sample_seed)
    bg = _background(rng, cfg)
    count = int(rng.integers(cfg.min_blobs, cfg.max_blobs + 1))
    img = bg.copy()
    mask = np.zeros(bg.shape, dtype=np.uint8)
    lo, hi = cfg.blob_intensity_range
    for cy, cx, a, b, theta, _ in _place_blobs(rng, cfg, count):
        cov = _coverage(cfg, cy, cx, a, b, theta)
        intensity = rng.uniform(lo, hi)
        img = img * (1.0 - cov) + intensity * cov
        mask[cov >= 0.5] = 1
    gains = np.ones(cfg.channels) if cfg.channels == 1 else rng.uniform(0.85, 1.0, cfg.channels)
    clean = np.clip(img[None] * gains[:, None, None], 0.0, 1.0)
    return clean, count - 1, mask


# --------------------------------------------------------------- degradation

@dataclass(frozen=True)
class DegradeConfig:
    """One degradation step, or a composite list applied in order.

    ``kind`` is one of gaussian, poisson, blur, downsample, composite, none.
    """
    kind: str = "gaussian"
    sigma: float = 0.1
    rate: float = 0.1
    kernel: int = 3
    std: float = 2.0
    factor: int = 2
    steps: tuple["DegradeConfig", ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in ("gaussian", "poisson", "blur", "downsample", "composite", "none"):
            raise ValueError(f"unknown degradation {self.kind!r}")
        if self.sigma < 0 or self.rate <= 0:
            raise ValueError("sigma must be >= 0 and rate > 0")
        if self.kind == "blur" and (self.kernel < 1 or self.kernel % 2 == 0):
            raise ValueError("blur kernel size must be odd")
        if self.kind == "downsample" and self.factor not in (2, 4):
            raise ValueError("downsample factor must be 2 or 4")

    @property
    def scale_factor(self) -> int:
        """Total spatial reduction of the pipeline."""
        if self.kind == "downsample":
            return self.factor
        if self.kind == "composite":
            return int(np.prod([s.scale_factor for s in self.steps])) if self.steps else 1
        return 1

    def describe(self) -> str:
        if self.kind == "gaussian":
            return f"gaussian({self.sigma:g})"
        if self.kind == "poisson":
            return f"poisson({self.rate:g})"
        if self.kind == "blur":
            return f"blur({self.kernel},{self.std:g})"
        if self.kind == "downsample":
            return f"downsample({self.factor})"
        if self.kind == "composite":
            return "+".join(s.describe() for s in self.steps)
        return "none"


_DEGRADE_RE = re.compile(r"^\s*(\w+)\s*(?:\(([^)]*)\))?\s*$")


def parse_degrade(text: str) -> DegradeConfig:
    """Parse ``gaussian(0.3)+poisson(0.1)+blur(3,2.0)``-style descriptions."""
    parts = [p for p in text.split("+") if p.strip()]
    if not parts:
        raise ValueError("empty degradation description")
    steps = []
    for part in parts:
        m = _DEGRADE_RE.match(part)
        if not m:
            raise ValueError(f"cannot parse degradation {part!r}")
        kind, args = m.group(1), [a.strip() for a in (m.group(2) or "").split(",") if a.strip()]
        try:
            if kind == "gaussian":
                steps.append(DegradeConfig("gaussian", sigma=float(args[0])))
            elif kind == "poisson":
                steps.append(DegradeConfig("poisson", rate=float(args[0])))
            elif kind == "blur":
                steps.append(DegradeConfig("blur", kernel=int(args[0]), std=float(args[1])))
            elif kind == "downsample":
                steps.append(DegradeConfig("downsample", factor=int(args[0])))
            elif kind == "none" and not args:
                steps.append(DegradeConfig("none"))
            else:
                raise ValueError(f"unknown degradation {kind!r}")
        except IndexError:
            raise ValueError(f"missing arguments in {part!r}") from None
    return steps[0] if len(steps) == 1 else DegradeConfig("composite", steps=tuple(steps))


def gaussian_kernel1d(size: int, std: float) -> np.ndarray:
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-(x ** 2) / (2.0 * std ** 2))
    return w / w.sum()


def blur(img: np.ndarray, size: int, std: float) -> np.ndarray:
    """Separable Gaussian blur with reflection padding on ``... x H x W``."""
    w = gaussian_kernel1d(size, std)
    r = size // 2
    out = img
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="reflect")
        n = out.shape[axis]
        # written as x + sum w_j (shift_j - x) so constant images pass through exactly
        acc = np.zeros_like(out)
        for j in range(size):
            acc += w[j] * (np.take(padded, np.arange(j, j + n), axis=axis) - out)
        out = out + acc
    return out


def block_mean(img: np.ndarray, factor: int) -> np.ndarray:
    *lead, h, w = img.shape
    if h % factor or w % factor:
        raise ValueError(f"image {h}x{w} not divisible by {factor}")
    y = img.reshape(*lead, h // factor, factor, w // factor, factor)
    # pairwise halving keeps constant blocks exact
    while y.shape[-3] > 1:
        y = (y[..., 0::2, :, :] + y[..., 1::2, :, :]) * 0.5
    while y.shape[-1] > 1:
        y = (y[..., 0::2] + y[..., 1::2]) * 0.5
    return y.reshape(*lead, h // factor, w // factor)


def degrade(clean: np.ndarray, cfg: DegradeConfig, noise_seed: int) -> np.ndarray:
    rng = rng_for(noise_seed)
    return _degrade(np.asarray(clean, dtype=np.float64), cfg, rng)


def _degrade(x, cfg, rng):
    if cfg.kind == "none":
        return x.copy()
    if cfg.kind == "gaussian":
        if cfg.sigma == 0:
            return x.copy()
        return np.clip(x + rng.normal(0.0, cfg.sigma, size=x.shape), 0.0, 1.0)
    if cfg.kind == "poisson":
        return np.clip(rng.poisson(np.maximum(x, 0.0) / cfg.rate) * cfg.rate, 0.0, 1.0)
    if cfg.kind == "blur":
        return blur(x, cfg.kernel, cfg.std)
    if cfg.kind == "downsample":
        return block_mean(x, cfg.factor)
    for step in cfg.steps:
        x = _degrade(x, step, rng)
    return x


# -------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class Sample:
    clean: np.ndarray
    degraded: np.ndarray
    label: int
    mask: np.ndarray
    sample_seed: int


def augment(sample: Sample, aug_seed: int, enabled: bool = True,
            max_angle: float = 10.0) -> Sample:
    """Random flips and a small rotation applied identically to all fields."""
    if not enabled:
        return sample
    rng = rng_for(aug_seed)
    hflip, vflip = rng.random() < 0.5, rng.random() < 0.5
    angle = rng.uniform(-max_angle, max_angle)
    clean, degraded, mask = sample.clean, sample.degraded, sample.mask
    if hflip:
        clean, degraded, mask = clean[..., ::-1], degraded[..., ::-1], mask[..., ::-1]
    if vflip:
        clean, degraded, mask = clean[..., ::-1, :], degraded[..., ::-1, :], mask[..., ::-1, :]
    clean = _rotate(clean, angle, order=1)
    degraded = _rotate(degraded, angle, order=1)
    mask = _rotate(mask, angle, order=0).astype(sample.mask.dtype)
    return Sample(np.ascontiguousarray(clean), np.ascontiguousarray(degraded), sample.label,
                  np.ascontiguousarray(mask), sample.sample_seed)


def _rotate(img, angle, order):
    axes = (img.ndim - 2, img.ndim - 1)
    return ndimage.rotate(img, angle, axes=axes, reshape=False, order=order, mode="reflect")


def flip_horizontal(sample: Sample) -> Sample:
    return Sample(np.ascontiguousarray(sample.clean[..., ::-1]),
                  np.ascontiguousarray(sample.degraded[..., ::-1]), sample.label,
                  np.ascontiguousarray(sample.mask[..., ::-1]), sample.sample_seed)


def center_crop(sample: Sample, aug_seed: int, scale_range=(0.5, 1.0)) -> Sample:
    """Random-scale centre crop resized back to full size (off by default)."""
    rng = rng_for(aug_seed, 0xC0)
    s = rng.uniform(*scale_range)
    h, w = sample.clean.shape[-2:]
    ch, cw = max(2, int(round(h * s))), max(2, int(round(w * s)))
    y0, x0 = (h - ch) // 2, (w - cw) // 2

    def crop(a, order):
        sub = a[..., y0:y0 + ch, x0:x0 + cw]
        zoom = [1.0] * (a.ndim - 2) + [h / ch, w / cw]
        out = ndimage.zoom(sub, zoom, order=order, mode="nearest", grid_mode=True)
        return out[..., :h, :w]

    f = sample.clean.shape[-1] // sample.degraded.shape[-1]
    degraded = crop(sample.degraded, 1) if f == 1 else block_mean(crop(sample.clean, 1), f)
    return Sample(crop(sample.clean, 1), degraded, sample.label,
                  crop(sample.mask, 0).astype(sample.mask.dtype), sample.sample_seed)


# ------------------------------------------------------------------ datasets

@dataclass
class Dataset:
    """Stacked train/eval arrays plus the per-sample seeds that produced them."""
    clean: dict[str, np.ndarray]
    degraded: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    seeds: dict[str, list[int]]
    dataset_seed: int
    scene: SceneConfig
    degradation: DegradeConfig

    def sample(self, split: str, i: int) -> Sample:
        return Sample(self.clean[split][i], self.degraded[split][i], int(self.labels[split][i]),
                      self.masks[split][i], self.seeds[split][i])

    def size(self, split: str) -> int:
        return len(self.seeds[split])

    def manifest(self) -> dict:
        return {
            "format": "gradprom-dataset",
            "version": 1,
            "dataset_seed": self.dataset_seed,
            "scene": asdict(self.scene),
            "degradation": self.degradation.describe(),
            "splits": {
                split: [{"index": i, "seed": s, "label": int(self.labels[split][i])}
                        for i, s in enumerate(self.seeds[split])]
                for split in ("train", "eval")
            },
        }


def make_sample(sample_seed: int, scene: SceneConfig, degradation: DegradeConfig) -> Sample:
    clean, label, mask = generate_scene(sample_seed, scene)
    degraded = degrade(clean, degradation, splitmix64(sample_seed ^ 0xDE6A))
    return Sample(clean, degraded, label, mask, sample_seed)


def make_dataset(dataset_seed: int, n_train: int, n_eval: int,
                 scene: SceneConfig = SceneConfig(),
                 degradation: DegradeConfig = DegradeConfig(),
                 eval_scene: SceneConfig | None = None) -> Dataset:
    """Build both splits; ``eval_scene`` allows a shifted evaluation distribution."""
    if n_train < 1 or n_eval < 1:
        raise ValueError("n_train and n_eval must be >= 1")
    out = dict(clean={}, degraded={}, labels={}, masks={}, seeds={})
    for split, n, sc in (("train", n_train, scene), ("eval", n_eval, eval_scene or scene)):
        seeds = [splitmix(dataset_seed, split, i) for i in range(n)]
        samples = [make_sample(s, sc, degradation) for s in seeds]
        out["clean"][split] = np.stack([s.clean for s in samples])
        out["degraded"][split] = np.stack([s.degraded for s in samples])
        out["labels"][split] = np.array([s.label for s in samples], dtype=np.int64)
        out["masks"][split] = np.stack([s.mask for s in samples])
        out["seeds"][split] = seeds
    return Dataset(dataset_seed=dataset_seed, scene=scene, degradation=degradation, **out)


# ------------------------------------------------------------------ file i/o

def write_pnm(path, img: np.ndarray, maxval: int = 65535):
    """Binary PGM (1 channel) or PPM (3 channels); 16-bit big-endian samples."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError("PNM images must have 1 or 3 channels")
    if np.issubdtype(img.dtype, np.integer):
        q = img.astype(np.int64)
    else:
        q = np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(np.int64)
    magic = b"P5" if c == 1 else b"P6"
    body = np.transpose(q, (1, 2, 0)).astype(">u2" if maxval > 255 else "u1").tobytes()
    Path(path).write_bytes(magic + f"\n{w} {h}\n{maxval}\n".encode() + body)


def read_pnm(path, as_float: bool = True) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    c = {b"P5": 1, b"P6": 3}.get(magic)
    if c is None:
        raise ValueError(f"unsupported PNM type {magic!r}")
    dt = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw[pos:], dtype=dt, count=w * h * c).reshape(h, w, c).transpose(2, 0, 1)
    if as_float:
        return data.astype(np.float64) / maxval
    return data.astype(np.int64)


def save_dataset(dataset: Dataset, root) -> Path:
    root = Path(root)
    for split in ("train", "eval"):
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for i in range(dataset.size(split)):
            write_pnm(d / f"{i:05d}_clean.pgm" if dataset.scene.channels == 1 else d / f"{i:05d}_clean.ppm",
                      dataset.clean[split][i])
            write_pnm(d / f"{i:05d}_degraded.pgm" if dataset.scene.channels == 1 else d / f"{i:05d}_degraded.ppm",
                      dataset.degraded[split][i])
            write_pnm(d / f"{i:05d}_mask.pgm", dataset.masks[split][i].astype(np.int64), maxval=1)
    (root / "manifest.json").write_text(json.dumps(dataset.manifest(), indent=2, sort_keys=True) + "\n")
    return root


def label_frequencies(labels: Sequence[int], n_classes: int = 3) -> np.ndarray:
    return np.bincount(np.asarray(labels), minlength=n_classes) / max(1, len(labels))

"""Desk-scale enhancer and recognizer networks.

Parameters live in a :class:`ParameterSet`, an ordered immutable snapshot of
named float64 arrays. Forward functions are pure: they take a mapping from
parameter name to :class:`~gradprom.autodiff.Tensor` (leaves on a tape, or
constants) and a batch, and build the graph on whatever tape the inputs
belong to.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

ROLES = ("enhancer_denoise", "enhancer_sr", "classifier", "segmenter")
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    role: str
    channels: int = 16
    depth: int = 3
    in_channels: int = 1
    n_classes: int = 3
    factor: int = 2

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown model role {self.role!r}")
        if self.channels < 1 or self.depth < 1 or self.in_channels < 1:
            raise ConfigError("channels, depth and in_channels must be positive")
        if self.role == "enhancer_sr" and self.factor not in (2, 4):
            raise ConfigError(f"super-resolution factor must be 2 or 4, got {self.factor}")
        if self.role in ("classifier", "segmenter") and self.n_classes < 2:
            raise ConfigError("recognizers need at least 2 classes")
        if self.role == "enhancer_denoise" and self.depth < 2:
            raise ConfigError("enhancer needs at least 2 conv blocks")

    @property
    def is_enhancer(self) -> bool:
        return self.role.startswith("enhancer")


def enhancer_config(task: str = "denoise", channels: int = 16, depth: int = 3,
                    in_channels: int = 1, factor: int = 2) -> ModelConfig:
    role = "enhancer_sr" if task == "sr" else "enhancer_denoise"
    return ModelConfig(role, channels=channels, depth=depth, in_channels=in_channels, factor=factor)


def classifier_config(n_classes: int = 3, channels: int = 16, in_channels: int = 1) -> ModelConfig:
    return ModelConfig("classifier", channels=channels, depth=2, in_channels=in_channels,
                       n_classes=n_classes)


def segmenter_config(n_classes: int = 2, channels: int = 16, in_channels: int = 1) -> ModelConfig:
    return ModelConfig("segmenter", channels=channels, depth=2, in_channels=in_channels,
                       n_classes=n_classes)


class ParameterSet:
    """Ordered, immutable collection of named parameter arrays."""

    __slots__ = ("_items",)

    def __init__(self, items):
        seen = set()
        frozen = []
        for name, arr in items:
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
            a = np.array(arr, dtype=np.float64)
            a.flags.writeable = False
            frozen.append((name, a))
        self._items = tuple(frozen)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, name: str) -> np.ndarray:
        for n, a in self._items:
            if n == name:
                return a
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self._items]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [a.shape for _, a in self._items]

    @property
    def size(self) -> int:
        return sum(a.size for _, a in self._items)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for _, a in self._items])

    def with_flat(self, vector: np.ndarray) -> "ParameterSet":
        return ParameterSet(unflatten(vector, self).items())

    def on_tape(self, tape: Tape | None) -> dict[str, Tensor]:
        """Leaves on ``tape`` (or constants when ``tape`` is None)."""
        if tape is None:
            return {n: Tensor(a) for n, a in self._items}
        return {n: tape.leaf(a) for n, a in self._items}

    def equals(self, other: "ParameterSet") -> bool:
        """Bit-level equality of names, shapes and values."""
        if self.names != other.names:
            return False
        return all(a.shape == b.shape and a.tobytes() == b.tobytes()
                   for (_, a), (_, b) in zip(self._items, other._items))

    def __repr__(self):
        return f"ParameterSet({len(self)} tensors, {self.size} values)"


# ------------------------------------------------------------------ init

def _param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) in architecture order; fan_in 0 marks a bias."""
    c, cin, k = cfg.channels, cfg.in_channels, 3
    specs = []

    def conv(name, o, i, ksize=k):
        specs.append((f"{name}.weight", (o, i, ksize, ksize), i * ksize * ksize))
        specs.append((f"{name}.bias", (o,), 0))

    if cfg.is_enhancer:
        conv("conv0", c, cin)
        for d in range(1, cfg.depth - 1):
            conv(f"conv{d}", c, c)
        conv(f"conv{cfg.depth - 1}", cin, c)
    elif cfg.role == "classifier":
        conv("conv0", c, cin)
        for d in range(1, cfg.depth):
            conv(f"conv{d}", c, c)
        specs.append(("fc.weight", (c, cfg.n_classes), c))
        specs.append(("fc.bias", (cfg.n_classes,), 0))
    else:
        conv("enc0", c, cin)
        conv("enc1", c, c)
        conv("dec0", c, 2 * c)
        conv("head", cfg.n_classes, c, ksize=1)
    return specs


def _stream_key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def init_params(cfg: ModelConfig, seed: int) -> ParameterSet:
    """Kaiming-normal weights, zero biases.

    Each tensor draws from its own Philox stream keyed by (seed, name), so
    adding a layer leaves the other layers' values untouched.
    """
    items = []
    for name, shape, fan_in in _param_specs(cfg):
        if fan_in == 0:
            items.append((name, np.zeros(shape)))
            continue
        rng = np.random.Generator(np.random.Philox(key=_stream_key(seed, name)))
        items.append((name, rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)))
    return ParameterSet(items)


def check_params(params: ParameterSet, cfg: ModelConfig):
    expected = [(n, s) for n, s, _ in _param_specs(cfg)]
    got = list(zip(params.names, params.shapes))
    if got != expected:
        raise ConfigError(f"parameters do not match {cfg.role} config")


# --------------------------------------------------------------- forward

def _conv(p: Mapping[str, Tensor], name: str, x, padding=1, mode="zero", stride=1):
    return ad.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], padding=padding,
                     mode=mode, stride=stride)


def _as_batch(batch) -> Tensor:
    t = batch if isinstance(batch, Tensor) else Tensor(batch)
    if t.data.ndim != 4:
        raise ad.ShapeError(f"expected an N x C x H x W batch, got {t.shape}")
    return t


def enhancer_forward(params: Mapping[str, Tensor], batch, cfg: ModelConfig) -> Tensor:
    """Residual enhancer.

    Denoise: ``x + f(x)``. SR: ``u + f(u)`` with ``u = upsample_nearest(x)``.
    The output is never clamped here.
    """
    x = _as_batch(batch)
    if x.shape[1] != cfg.in_channels:
        raise ad.ShapeError(f"enhancer expects {cfg.in_channels} channels, got {x.shape[1]}")
    if cfg.role == "enhancer_sr":
        x = ad.upsample_nearest(x, cfg.factor)
    h = x
    for d in range(cfg.depth - 1):
        h = ad.relu(_conv(params, f"conv{d}", h, mode="reflect"))
    residual = _conv(params, f"conv{cfg.depth - 1}", h, mode="reflect")
    return ad.add(x, residual)


def recognizer_forward(params: Mapping[str, Tensor], batch, cfg: ModelConfig) -> Tensor:
    """Classifier logits ``[N x C]`` or segmenter logits ``[N x K x H x W]``."""
    x = _as_batch(batch)
    if x.shape[1] != cfg.in_channels:
        raise ad.ShapeError(f"recognizer expects {cfg.in_channels} channels, got {x.shape[1]}")
    if cfg.role == "classifier":
        h = x
        for d in range(cfg.depth):
            h = ad.relu(_conv(params, f"conv{d}", h))
        pooled = ad.global_avgpool(h)
        flat = ad.reshape(pooled, (pooled.shape[0], pooled.shape[1]))
        return ad.bias_add(ad.matmul(flat, params["fc.weight"]), params["fc.bias"])
    if cfg.role == "segmenter":
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ad.ShapeError("segmenter needs even spatial dimensions")
        e0 = ad.relu(_conv(params, "enc0", x))
        e1 = ad.relu(_conv(params, "enc1", ad.avgpool(e0, 2)))
        up = ad.upsample_nearest(e1, 2)
        d0 = ad.relu(_conv(params, "dec0", ad.concat_channels([up, e0])))
        return _conv(params, "head", d0, padding=0)
    raise ConfigError(f"{cfg.role} is not a recognizer")


def forward(params: Mapping[str, Tensor], batch, cfg: ModelConfig) -> Tensor:
    if cfg.is_enhancer:
        return enhancer_forward(params, batch, cfg)
    return recognizer_forward(params, batch, cfg)


def predict(params: ParameterSet, batch: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Tape-free forward pass returning a plain array."""
    return forward(params.on_tape(None), batch, cfg).numpy()


# --------------------------------------------------------- flatten/unflatten

def flatten_grads(params: ParameterSet, grads: Mapping[str, np.ndarray]) -> np.ndarray:
    """Concatenate per-parameter gradients in parameter order; gaps are zeros."""
    parts = []
    for name, a in params:
        g = grads.get(name)
        if g is None:
            parts.append(np.zeros(a.size))
        else:
            g = np.asarray(g, dtype=np.float64)
            if g.shape != a.shape:
                raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {a.shape}")
            parts.append(g.reshape(-1))
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten(vector: np.ndarray, params: ParameterSet) -> dict[str, np.ndarray]:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1 or vector.size != params.size:
        raise ValueError(f"vector of length {vector.size} does not match {params.size} parameters")
    out, offset = {}, 0
    for name, a in params:
        out[name] = vector[offset:offset + a.size].reshape(a.shape).copy()
        offset += a.size
    return out


def named_grads(leaves: Mapping[str, Tensor], grads: Mapping[int, np.ndarray]) -> dict[str, np.ndarray]:
    return {n: grads[t.node] for n, t in leaves.items() if t.node in grads}


# -------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: ParameterSet, cfg: ModelConfig):
    """Write ``<path>/manifest.txt`` plus one little-endian float64 file per tensor."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = [f"gradprom-checkpoint {CHECKPOINT_VERSION}",
             "config " + json.dumps(asdict(cfg), sort_keys=True)]
    for i, (name, a) in enumerate(params):
        fname = f"{i:03d}_{name}.f64"
        lines.append(f"param {name} {','.join(map(str, a.shape)) or '-'} {fname}")
        (root / fname).write_bytes(np.ascontiguousarray(a, dtype="<f8").tobytes())
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[ParameterSet, ModelConfig]:
    root = Path(path)
    lines = (root / "manifest.txt").read_text().splitlines()
    head = lines[0].split()
    if head[0] != "gradprom-checkpoint" or int(head[1]) != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint header {lines[0]!r}")
    cfg = ModelConfig(**json.loads(lines[1][len("config "):]))
    items = []
    for line in lines[2:]:
        _, name, shape_s, fname = line.split()
        shape = () if shape_s == "-" else tuple(int(s) for s in shape_s.split(","))
        data = np.frombuffer((root / fname).read_bytes(), dtype="<f8")
        items.append((name, data.reshape(shape).astype(np.float64)))
    params = ParameterSet(items)
    check_params(params, cfg)
    return params, cfg

"""Gradient extraction, cosine gating, training strategies and the Adam loop.

Notation used below: ``g_ip`` is the gradient of the enhancement loss with
respect to the enhancer parameters (theta); ``g_vr_theta`` is the gradient of
the recognition loss with respect to theta (back-propagated through the
recognizer into the enhancer); ``g_vr_phi`` is the recognition-loss gradient
with respect to the recognizer parameters (phi).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape
from .losses import pixel_loss, supervised_vr_loss, unsup_vr_loss
from .models import (ModelConfig, ParameterSet, enhancer_forward, flatten_grads,
                     init_params, named_grads, recognizer_forward)
from .synthdata import Dataset, Sample, augment, center_crop, rng_for

STRATEGIES = ("joint", "frozen", "gradprom", "none", "recognizer_only")
GATE_MODES = ("hard", "cosine")
SUPERVISION = ("unsupervised", "supervised")
NORM_FLOOR = 1e-12
STEPS_CSV_VERSION = 1
STEPS_COLUMNS = ("step", "epoch", "strategy", "supervision", "gate_mode", "loss_ip", "loss_vr",
                 "cosine_s", "gate_open", "norm_g_ip", "norm_g_vr", "inner_product_check")

# phase tags for independent random streams
_PRETRAIN, _WARMUP, _TASK = 0x50, 0x57, 0x54


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss, gradient or parameter."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class StrategyConfig:
    strategy: str = "gradprom"
    gate_mode: str = "hard"
    supervision: str = "supervised"
    lam: float = 1e-4
    warmup_epochs: int = 1
    vr_pretrain_epochs: int = 2
    update_vr_params: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"unknown gate mode {self.gate_mode!r}")
        if self.supervision not in SUPERVISION:
            raise ValueError(f"unknown supervision setting {self.supervision!r}")
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if self.warmup_epochs < 0 or self.vr_pretrain_epochs < 0:
            raise ValueError("epoch counts must be non-negative")

    @property
    def uses_enhancer(self) -> bool:
        return self.strategy != "recognizer_only"

    @property
    def uses_recognizer_loss(self) -> bool:
        return self.strategy in ("joint", "frozen", "gradprom")

    @property
    def updates_phi(self) -> bool:
        if self.strategy == "recognizer_only":
            return True
        return self.strategy in ("joint", "gradprom") and self.update_vr_params


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    pretrain_lr: float = 1e-3

    def __post_init__(self):
        if not self.lr > 0 or not self.pretrain_lr > 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


@dataclass(frozen=True)
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamMoments":
        return cls(np.zeros(size), np.zeros(size), 0)


@dataclass(frozen=True)
class Models:
    enhancer: ModelConfig
    recognizers: tuple[ModelConfig, ...] = ()


@dataclass(frozen=True)
class TrainState:
    theta: ParameterSet
    phi: tuple[ParameterSet, ...]
    theta_moments: AdamMoments
    phi_moments: tuple[AdamMoments, ...]
    epoch: int = 0
    step: int = 0
    seed: int = 0


@dataclass(frozen=True)
class Batch:
    degraded: np.ndarray
    clean: np.ndarray
    labels: np.ndarray
    masks: np.ndarray


@dataclass(frozen=True)
class StepRecord:
    step: int
    epoch: int
    strategy: str
    supervision: str
    gate_mode: str
    loss_ip: float
    loss_vr: float
    cosine_s: float
    gate_open: bool
    norm_g_ip: float
    norm_g_vr: float
    inner_product_check: float

    def row(self) -> list[str]:
        return [str(self.step), str(self.epoch), self.strategy, self.supervision, self.gate_mode,
                repr(self.loss_ip), repr(self.loss_vr), repr(self.cosine_s),
                "1" if self.gate_open else "0", repr(self.norm_g_ip), repr(self.norm_g_vr),
                repr(self.inner_product_check)]


@dataclass
class TaskGradients:
    g_ip: np.ndarray
    g_vr_theta: list[np.ndarray]
    g_vr_phi: list[np.ndarray]
    loss_ip: float
    loss_vr: list[float]


# ------------------------------------------------------------ gating rules

def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two flat vectors; 0 if either is ~zero."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        return 0.0
    s = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, s))


def _aux_coefficient(s: float, lam: float, mode: str) -> float:
    if mode == "hard":
        return lam if s >= 0 else 0.0
    if mode == "cosine":
        return lam * max(0.0, s)
    raise ValueError(f"unknown gate mode {mode!r}")


def combine_gradients(g_ip: np.ndarray, g_vr: np.ndarray, lam: float, mode: str = "hard"):
    """Gated enhancer direction.

    ``hard``: ``g_ip + lam * g_vr`` if the cosine is non-negative, else a copy of
    ``g_ip``. ``cosine``: ``g_ip + lam * max(0, s) * g_vr``.
    Returns ``(d_theta, s, gate_open)``.
    """
    g_ip = np.asarray(g_ip, dtype=np.float64)
    g_vr = np.asarray(g_vr, dtype=np.float64)
    if g_ip.shape != g_vr.shape:
        raise ValueError(f"length mismatch {g_ip.shape} vs {g_vr.shape}")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    s = cosine_similarity(g_ip, g_vr)
    coef = _aux_coefficient(s, lam, mode)
    d = g_ip.copy() if coef == 0.0 else g_ip + coef * g_vr
    return d, s, s >= 0


def combine_gradients_multi(g_ip: np.ndarray, g_vr_list: Sequence[np.ndarray], lam: float,
                            mode: str = "hard") -> np.ndarray:
    """Gate each auxiliary gradient independently against ``g_ip`` and sum."""
    d, _, _ = _combine_multi(g_ip, g_vr_list, lam, mode, gated=True)
    return d


def _combine_multi(g_ip, g_vr_list, lam, mode, gated):
    g_ip = np.asarray(g_ip, dtype=np.float64)
    d = g_ip.copy()
    cosines = []
    for g in g_vr_list:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != g_ip.shape:
            raise ValueError(f"length mismatch {g_ip.shape} vs {g.shape}")
        s = cosine_similarity(g_ip, g)
        cosines.append(s)
        coef = _aux_coefficient(s, lam, mode) if gated else lam
        if coef != 0.0:
            d = d + coef * g
    return d, cosines, all(s >= 0 for s in cosines)


def descent_check(d_theta: np.ndarray, g_ip: np.ndarray) -> float:
    d_theta, g_ip = np.asarray(d_theta), np.asarray(g_ip)
    if d_theta.shape != g_ip.shape:
        raise ValueError("length mismatch")
    return float(np.dot(d_theta, g_ip))


# --------------------------------------------------------------- optimizer

def adam_update(params: ParameterSet, direction: np.ndarray, moments: AdamMoments,
                optim: OptimConfig, lr: float | None = None):
    """One bias-corrected Adam step along ``direction`` (a descent gradient)."""
    g = np.asarray(direction, dtype=np.float64)
    if g.shape != (params.size,) or moments.m.shape != g.shape:
        raise ValueError("direction and moments must match the parameter count")
    b1, b2 = optim.beta1, optim.beta2
    t = moments.t + 1
    m = b1 * moments.m + (1.0 - b1) * g
    v = b2 * moments.v + (1.0 - b2) * (g * g)
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    step = (optim.lr if lr is None else lr) * m_hat / (np.sqrt(v_hat) + optim.eps)
    return params.with_flat(params.flat() - step), AdamMoments(m, v, t)


# ---------------------------------------------------------------- gradients

def _recognizer_input(x: ad.Tensor, cfg: ModelConfig, target_hw) -> ad.Tensor:
    # recognizers see full-resolution images; upsample low-res inputs
    factor = target_hw[0] // x.shape[2]
    return x if factor == 1 else ad.upsample_nearest(x, factor)


def _vr_loss(vr_leaves, vr_cfg, recog_in, batch: Batch, supervision: str):
    if supervision == "unsupervised":
        return unsup_vr_loss(vr_leaves, recog_in, batch.clean, vr_cfg)
    logits = recognizer_forward(vr_leaves, recog_in, vr_cfg)
    target = batch.labels if vr_cfg.role == "classifier" else batch.masks
    return supervised_vr_loss(logits, target, vr_cfg)


def compute_task_gradients(state: TrainState, batch: Batch, strategy: StrategyConfig,
                           models: Models, with_recognizer: bool = True) -> TaskGradients:
    """One forward pass, then one backward pass per loss over the same tape."""
    tape = Tape()
    theta = state.theta.on_tape(tape)
    enhanced = enhancer_forward(theta, batch.degraded, models.enhancer)
    loss_ip = pixel_loss("mse", enhanced, batch.clean)
    vr_losses, phis = [], []
    if with_recognizer:
        for phi, cfg in zip(state.phi, models.recognizers):
            leaves = phi.on_tape(tape)
            phis.append((phi, leaves))
            vr_losses.append(_vr_loss(leaves, cfg, enhanced, batch, strategy.supervision))
    grads = ad.backward(tape, loss_ip, wrt=theta.values())
    g_ip = flatten_grads(state.theta, named_grads(theta, grads))
    g_vr_theta, g_vr_phi = [], []
    for (phi, leaves), loss in zip(phis, vr_losses):
        grads = ad.backward(tape, loss, wrt=list(theta.values()) + list(leaves.values()))
        g_vr_theta.append(flatten_grads(state.theta, named_grads(theta, grads)))
        g_vr_phi.append(flatten_grads(phi, named_grads(leaves, grads)))
    return TaskGradients(g_ip, g_vr_theta, g_vr_phi, loss_ip.item(), [l.item() for l in vr_losses])


def combined_loss_gradient(state: TrainState, batch: Batch, strategy: StrategyConfig,
                           models: Models) -> np.ndarray:
    """Single-backward gradient of ``L_IP + lam * sum(L_VR)`` w.r.t. theta."""
    tape = Tape()
    theta = state.theta.on_tape(tape)
    enhanced = enhancer_forward(theta, batch.degraded, models.enhancer)
    total = pixel_loss("mse", enhanced, batch.clean)
    for phi, cfg in zip(state.phi, models.recognizers):
        leaves = phi.on_tape(tape)
        total = ad.add(total, ad.scale(_vr_loss(leaves, cfg, enhanced, batch, strategy.supervision),
                                       strategy.lam))
    grads = ad.backward(tape, total, wrt=theta.values())
    return flatten_grads(state.theta, named_grads(theta, grads))


def recognizer_gradients(phi: ParameterSet, cfg: ModelConfig, images: np.ndarray,
                         batch: Batch):
    """Supervised recognizer loss and gradient on ``images`` (no enhancer)."""
    tape = Tape()
    leaves = phi.on_tape(tape)
    x = tape.leaf(images, requires_grad=False)
    x = _recognizer_input(x, cfg, batch.clean.shape[2:])
    loss = _vr_loss(leaves, cfg, x, batch, "supervised")
    grads = ad.backward(tape, loss, wrt=leaves.values())
    return loss.item(), flatten_grads(phi, named_grads(leaves, grads))


# ---------------------------------------------------------------- train step

def _check_finite(step: int, **arrays):
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise NumericalAbort(step, f"non-finite {name}")


def _norm(v) -> float:
    return float(np.linalg.norm(v))


def train_step(state: TrainState, batch: Batch, strategy: StrategyConfig, optim: OptimConfig,
               models: Models) -> tuple[TrainState, StepRecord]:
    step = state.step
    kind = strategy.strategy
    try:
        if kind == "recognizer_only":
            return _recognizer_only_step(state, batch, strategy, optim, models)
        tg = compute_task_gradients(state, batch, strategy, models,
                                    with_recognizer=strategy.uses_recognizer_loss)
    except NonFiniteError as exc:
        raise NumericalAbort(step, str(exc)) from exc
    _check_finite(step, g_ip=tg.g_ip, **{f"g_vr_theta{k}": g for k, g in enumerate(tg.g_vr_theta)})

    if kind == "none":
        d, cosines, gate_open = tg.g_ip.copy(), [], False
    else:
        d, cosines, gate_open = _combine_multi(tg.g_ip, tg.g_vr_theta, strategy.lam,
                                               strategy.gate_mode, gated=(kind == "gradprom"))
        if kind != "gradprom":
            gate_open = True
    _check_finite(step, d_theta=d)
    theta, theta_m = adam_update(state.theta, d, state.theta_moments, optim)
    phi, phi_m = state.phi, state.phi_moments
    if strategy.updates_phi:
        new = [adam_update(p, g, m, optim) for p, g, m in zip(state.phi, tg.g_vr_phi, state.phi_moments)]
        phi = tuple(p for p, _ in new)
        phi_m = tuple(m for _, m in new)
    _check_finite(step, theta=theta.flat(), **{f"phi{k}": p.flat() for k, p in enumerate(phi)})

    g_vr_sum = sum(tg.g_vr_theta) if tg.g_vr_theta else np.zeros(0)
    record = StepRecord(
        step=step, epoch=state.epoch, strategy=kind, supervision=strategy.supervision,
        gate_mode=strategy.gate_mode, loss_ip=tg.loss_ip, loss_vr=float(sum(tg.loss_vr)),
        cosine_s=min(cosines) if cosines else 0.0, gate_open=bool(gate_open),
        norm_g_ip=_norm(tg.g_ip), norm_g_vr=_norm(g_vr_sum),
        inner_product_check=descent_check(d, tg.g_ip))
    new_state = replace(state, theta=theta, phi=phi, theta_moments=theta_m, phi_moments=phi_m,
                        step=step + 1)
    return new_state, record


def _recognizer_only_step(state, batch, strategy, optim, models):
    losses, phis, moms = [], [], []
    for p, cfg, m in zip(state.phi, models.recognizers, state.phi_moments):
        loss, g = recognizer_gradients(p, cfg, batch.degraded, batch)
        _check_finite(state.step, g_vr_phi=g)
        p2, m2 = adam_update(p, g, m, optim)
        losses.append(loss)
        phis.append(p2)
        moms.append(m2)
    record = StepRecord(state.step, state.epoch, strategy.strategy, strategy.supervision,
                        strategy.gate_mode, 0.0, float(sum(losses)), 0.0, False, 0.0, 0.0, 0.0)
    return replace(state, phi=tuple(phis), phi_moments=tuple(moms), step=state.step + 1), record


def enhancer_only_step(state: TrainState, batch: Batch, optim: OptimConfig, models: Models,
                       lr: float | None = None) -> tuple[TrainState, float]:
    try:
        tg = compute_task_gradients(state, batch, StrategyConfig(strategy="none"), models,
                                    with_recognizer=False)
    except NonFiniteError as exc:
        raise NumericalAbort(state.step, f"warmup: {exc}") from exc
    _check_finite(state.step, g_ip=tg.g_ip)
    theta, mom = adam_update(state.theta, tg.g_ip, state.theta_moments, optim, lr=lr)
    return replace(state, theta=theta, theta_moments=mom), tg.loss_ip


# ------------------------------------------------------------------- epochs

def init_state(models: Models, seed: int) -> TrainState:
    theta = init_params(models.enhancer, seed)
    phi = tuple(init_params(cfg, seed + 7919 * (k + 1)) for k, cfg in enumerate(models.recognizers))
    return TrainState(theta=theta, phi=phi, theta_moments=AdamMoments.zeros(theta.size),
                      phi_moments=tuple(AdamMoments.zeros(p.size) for p in phi), seed=seed)


def iter_batches(dataset: Dataset, seed: int, phase: int, epoch: int, batch_size: int,
                 augment_enabled: bool = True, crop_enabled: bool = False) -> Iterable[Batch]:
    """Shuffled (and optionally augmented) training batches for one epoch."""
    n = dataset.size("train")
    order = rng_for(seed, phase, epoch).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        samples = []
        for i in idx:
            s = dataset.sample("train", int(i))
            aug_seed = int(rng_for(seed, phase, epoch, int(i)).integers(0, 2 ** 63))
            if crop_enabled:
                s = center_crop(s, aug_seed)
            s = augment(s, aug_seed, augment_enabled)
            samples.append(s)
        yield _stack(samples)


def _stack(samples: Sequence[Sample]) -> Batch:
    return Batch(np.stack([s.degraded for s in samples]), np.stack([s.clean for s in samples]),
                 np.array([s.label for s in samples], dtype=np.int64),
                 np.stack([s.mask for s in samples]).astype(np.int64))


def warmup_and_pretrain(state: TrainState, dataset: Dataset, strategy: StrategyConfig,
                        optim: OptimConfig, models: Models, augment_enabled: bool = True,
                        crop_enabled: bool = False) -> TrainState:
    """Supervised recognizer pretraining on clean images, then enhancer-only warmup.

    Recognizer moments are reset after pretraining; the enhancer's moments
    carry over into the task-driven phase.
    """
    if models.recognizers and strategy.vr_pretrain_epochs > 0:
        phis = list(state.phi)
        for k, cfg in enumerate(models.recognizers):
            mom = AdamMoments.zeros(phis[k].size)
            for epoch in range(strategy.vr_pretrain_epochs):
                for batch in iter_batches(dataset, state.seed + k, _PRETRAIN, epoch, optim.batch_size,
                                          augment_enabled, crop_enabled):
                    try:
                        _, g = recognizer_gradients(phis[k], cfg, batch.clean, batch)
                    except NonFiniteError as exc:
                        raise NumericalAbort(-1, f"recognizer pretraining: {exc}") from exc
                    _check_finite(-1, g_vr_phi=g)
                    phis[k], mom = adam_update(phis[k], g, mom, optim, lr=optim.pretrain_lr)
        state = replace(state, phi=tuple(phis),
                        phi_moments=tuple(AdamMoments.zeros(p.size) for p in phis))
    if strategy.uses_enhancer:
        for epoch in range(strategy.warmup_epochs):
            for batch in iter_batches(dataset, state.seed, _WARMUP, epoch, optim.batch_size,
                                      augment_enabled, crop_enabled):
                state, _ = enhancer_only_step(state, batch, optim, models)
    return state


def train_epoch(state: TrainState, dataset: Dataset, strategy: StrategyConfig, optim: OptimConfig,
                models: Models, augment_enabled: bool = True, crop_enabled: bool = False,
                on_record: Callable[[StepRecord], None] | None = None) -> TrainState:
    for batch in iter_batches(dataset, state.seed, _TASK, state.epoch, optim.batch_size,
                              augment_enabled, crop_enabled):
        state, rec = train_step(state, batch, strategy, optim, models)
        if on_record is not None:
            on_record(rec)
    return replace(state, epoch=state.epoch + 1)


def fit(dataset: Dataset, models: Models, strategy: StrategyConfig, optim: OptimConfig,
        epochs: int, seed: int, augment_enabled: bool = True, crop_enabled: bool = False,
        on_epoch: Callable[[TrainState], None] | None = None):
    """Full run: pretrain/warmup, then ``epochs`` task-driven epochs.

    Returns ``(final_state, step_records)``.
    """
    records: list[StepRecord] = []
    state = init_state(models, seed)
    state = warmup_and_pretrain(state, dataset, strategy, optim, models, augment_enabled, crop_enabled)
    for _ in range(epochs):
        state = train_epoch(state, dataset, strategy, optim, models, augment_enabled, crop_enabled,
                            records.append)
        if on_epoch is not None:
            on_epoch(state)
    return state, records


# ---------------------------------------------------------------- steps.csv

def format_steps_csv(records: Iterable[StepRecord]) -> str:
    buf = io.StringIO()
    buf.write(f"# gradprom-steps v{STEPS_CSV_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STEPS_COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def read_steps_csv(path_or_text) -> list[dict]:
    text = path_or_text
    if not isinstance(text, str) or "\n" not in text:
        with open(path_or_text) as fh:
            text = fh.read()
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    if not lines:
        return []
    rows = list(csv.DictReader(lines))
    if rows and tuple(rows[0].keys()) != STEPS_COLUMNS:
        raise ValueError("steps CSV header does not match the expected schema")
    out = []
    for row in rows:
        rec = dict(row)
        for key in ("step", "epoch"):
            rec[key] = int(rec[key])
        for key in ("loss_ip", "loss_vr", "cosine_s", "norm_g_ip", "norm_g_vr", "inner_product_check"):
            rec[key] = float(rec[key])
        rec["gate_open"] = rec["gate_open"] == "1"
        out.append(rec)
    return out

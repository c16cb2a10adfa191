"""Finite-difference battery over every autodiff primitive and model role."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import autodiff as ad
from ..losses import pixel_loss, supervised_vr_loss, unsup_vr_loss
from ..models import (ModelConfig, classifier_config, enhancer_config, enhancer_forward,
                      init_params, recognizer_forward, segmenter_config)

TOLERANCE = 1e-6


@dataclass(frozen=True)
class Case:
    name: str
    make: Callable[[np.random.Generator], list[np.ndarray]]
    fn: Callable[..., ad.Tensor]
    # argument positions to check; None means all
    positions: tuple[int, ...] | None = None


@dataclass
class CheckResult:
    name: str
    max_error: float
    n_checks: int

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _project(out: ad.Tensor, rng_seed: int) -> ad.Tensor:
    # random fixed weights so every output element contributes
    if out.size == 1:
        return ad.reshape(out, ())
    w = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return ad.sum_all(ad.mul(out, ad.constant(w)))


def _away_from_zero(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _n(rng, *shape):
    return rng.standard_normal(shape)


PRIMITIVES = [
    Case("add", lambda r: [_n(r, 3, 4), _n(r, 3, 4)], ad.add),
    Case("sub", lambda r: [_n(r, 3, 4), _n(r, 3, 4)], ad.sub),
    Case("mul", lambda r: [_n(r, 3, 4), _n(r, 3, 4)], ad.mul),
    Case("scale", lambda r: [_n(r, 5)], lambda a: ad.scale(a, -1.7)),
    Case("relu", lambda r: [_away_from_zero(r, (4, 5))], ad.relu),
    Case("sigmoid", lambda r: [3.0 * _n(r, 4, 5)], ad.sigmoid),
    Case("abs", lambda r: [_away_from_zero(r, (4, 5))], ad.absolute),
    Case("bias_add", lambda r: [_n(r, 2, 3, 4, 4), _n(r, 3)], ad.bias_add),
    Case("matmul", lambda r: [_n(r, 3, 4), _n(r, 4, 2)], ad.matmul),
    Case("conv2d_zero", lambda r: [_n(r, 2, 2, 6, 6), _n(r, 3, 2, 3, 3), _n(r, 3)],
         lambda x, k, b: ad.conv2d(x, k, b, padding=1, mode="zero")),
    Case("conv2d_reflect", lambda r: [_n(r, 2, 2, 6, 6), _n(r, 3, 2, 3, 3), _n(r, 3)],
         lambda x, k, b: ad.conv2d(x, k, b, padding=1, mode="reflect")),
    Case("conv2d_stride2", lambda r: [_n(r, 1, 2, 7, 7), _n(r, 2, 2, 3, 3)],
         lambda x, k: ad.conv2d(x, k, padding=1, stride=2)),
    Case("conv2d_1x1", lambda r: [_n(r, 2, 3, 4, 4), _n(r, 2, 3, 1, 1), _n(r, 2)],
         lambda x, k, b: ad.conv2d(x, k, b, padding=0)),
    Case("avgpool", lambda r: [_n(r, 2, 2, 4, 4)], lambda x: ad.avgpool(x, 2)),
    Case("upsample_nearest", lambda r: [_n(r, 2, 2, 3, 3)], lambda x: ad.upsample_nearest(x, 2)),
    Case("global_avgpool", lambda r: [_n(r, 2, 3, 4, 4)], ad.global_avgpool),
    Case("mean", lambda r: [_n(r, 3, 4)], ad.mean),
    Case("sum_all", lambda r: [_n(r, 3, 4)], ad.sum_all),
    Case("reshape", lambda r: [_n(r, 2, 6)], lambda x: ad.reshape(x, (3, 4))),
    Case("concat_channels", lambda r: [_n(r, 2, 1, 3, 3), _n(r, 2, 2, 3, 3)],
         lambda a, b: ad.concat_channels([a, b])),
    Case("log_softmax", lambda r: [2.0 * _n(r, 3, 4)], lambda x: ad.log_softmax(x, axis=-1)),
    Case("log_softmax_axis1", lambda r: [2.0 * _n(r, 2, 3, 2, 2)], lambda x: ad.log_softmax(x, axis=1)),
]


def _model_case(name: str, cfg: ModelConfig, loss: str) -> Case:
    """Check every parameter tensor and the input of a small model + loss."""
    names = [n for n, *_ in _specs(cfg)]

    def make(rng):
        params = init_params(cfg, int(rng.integers(0, 2 ** 31)))
        # non-zero biases so the bias path is exercised
        arrays = [params[n] + (0.1 * rng.standard_normal(params[n].shape) if n.endswith("bias") else 0)
                  for n in names]
        hw = 4 if cfg.role == "enhancer_sr" else 8
        x = rng.uniform(0.05, 0.95, size=(2, cfg.in_channels, hw, hw))
        return arrays + [x]

    def fn(*args):
        *ps, x = args
        p = dict(zip(names, ps))
        if cfg.is_enhancer:
            out = enhancer_forward(p, x, cfg)
            target = np.full(out.shape, 0.5)
            return pixel_loss("mse", out, target)
        if loss == "unsupervised":
            return unsup_vr_loss(p, x, np.full(x.shape, 0.5), cfg)
        logits = recognizer_forward(p, x, cfg)
        n = x.shape[0]
        target = (np.arange(n) % cfg.n_classes if cfg.role == "classifier"
                  else (np.arange(n * 64).reshape(n, 8, 8) % cfg.n_classes))
        return supervised_vr_loss(logits, target, cfg)

    # the unsupervised target is detached from the recognizer parameters on
    # purpose, so finite differences only agree along the input
    positions = (len(names),) if loss == "unsupervised" else None
    return Case(name, make, fn, positions)


def _specs(cfg):
    from ..models import _param_specs
    return _param_specs(cfg)


def model_cases() -> list[Case]:
    small = dict(channels=4)
    return [
        _model_case("model_enhancer_denoise", enhancer_config("denoise", depth=3, **small), "mse"),
        _model_case("model_enhancer_sr", enhancer_config("sr", depth=3, factor=2, **small), "mse"),
        _model_case("model_classifier", classifier_config(3, **small), "supervised"),
        _model_case("model_segmenter", segmenter_config(2, **small), "supervised"),
        _model_case("model_classifier_unsup", classifier_config(3, **small), "unsupervised"),
        _model_case("model_segmenter_unsup", segmenter_config(2, **small), "unsupervised"),
    ]


def check_case(case: Case, seed: int, coords_per_arg: int = 3) -> float:
    """Worst error over each argument of ``case`` at one random point."""
    rng = np.random.default_rng([seed, len(case.name)] + [ord(c) for c in case.name])
    args = case.make(rng)
    worst = 0.0
    for pos, point in enumerate(args):
        if case.positions is not None and pos not in case.positions:
            continue
        def wrapped(leaf, pos=pos):
            full = [leaf if i == pos else ad.constant(a) for i, a in enumerate(args)]
            return _project(case.fn(*full), seed)
        k = min(coords_per_arg, point.size)
        coords = rng.choice(point.size, size=k, replace=False)
        worst = max(worst, ad.grad_check(wrapped, point, coords=coords))
    return worst


def run_battery(n_seeds: int = 50, coords_per_arg: int = 3,
                cases: list[Case] | None = None) -> list[CheckResult]:
    cases = PRIMITIVES + model_cases() if cases is None else cases
    results = []
    for case in cases:
        errs = [check_case(case, s, coords_per_arg) for s in range(n_seeds)]
        results.append(CheckResult(case.name, float(max(errs)), n_seeds))
    return results


def report(results: list[CheckResult], elapsed: float) -> str:
    lines = [f"{'case':<26} {'max_rel_err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<26} {r.max_error:12.3e}  {'ok' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in results)
    lines.append(f"{len(results)} cases x {results[0].n_checks if results else 0} seeds, "
                 f"{elapsed:.1f}s: {'PASS' if ok else 'FAIL'}")
    return "\n".join(lines) + "\n"


def main_battery(n_seeds: int = 50) -> tuple[bool, str]:
    t0 = time.perf_counter()
    results = run_battery(n_seeds)
    return all(r.passed for r in results), report(results, time.perf_counter() - t0)

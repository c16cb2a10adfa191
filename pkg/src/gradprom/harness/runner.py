"""Single-experiment runner: dataset, training, evaluation and persistence."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..autodiff import NonFiniteError
from ..engine import (Models, NumericalAbort, StepRecord, TrainState, fit, format_steps_csv)
from ..metrics import (MetricsRecord, accuracy, confusion, miou_from_confusion, psnr, ssim)
from ..models import (ConfigError as ModelConfigError, ModelConfig, ParameterSet,
                      load_checkpoint, predict, save_checkpoint)
from ..synthdata import Dataset, make_dataset
from .config import ExperimentConfig, config_dict, format_config

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("seed", "epoch", "step", "strategy", "psnr", "ssim", "accuracy", "miou",
                   "n_samples")
_EVAL_CHUNK = 64


@dataclass
class RunSummary:
    per_seed: dict[int, MetricsRecord]
    mean: dict[str, float]
    std: dict[str, float] | None
    config: dict
    wall_clock: float = 0.0
    version: str = __version__
    aborted: dict[int, int] = field(default_factory=dict)

    def to_json(self) -> str:
        # wall-clock is kept out of the JSON so reruns stay byte-identical
        doc = {
            "artifact_version": self.version,
            "config": self.config,
            "per_seed": {str(s): _metrics_dict(m) for s, m in sorted(self.per_seed.items())},
            "mean": self.mean,
            "std": self.std,
            "aborted": {str(s): step for s, step in sorted(self.aborted.items())},
        }
        return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _metrics_dict(m: MetricsRecord) -> dict:
    return {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in m.as_dict().items()}


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    eval_scene = cfg.scene("eval") if d.eval_distribution else None
    return make_dataset(d.seed, d.n_train, d.n_eval, cfg.scene(), cfg.degradation(), eval_scene)


def _upsample(x: np.ndarray, f: int) -> np.ndarray:
    return x if f == 1 else np.repeat(np.repeat(x, f, axis=-2), f, axis=-1)


def evaluate_models(theta: ParameterSet | None, enhancer: ModelConfig | None,
                    phis, recognizers, dataset: Dataset, split: str = "eval") -> MetricsRecord:
    """Metrics on one split, reduced in sample-index order.

    With ``theta=None`` the degraded input (nearest-upsampled for SR) is
    scored as if it were the enhanced image.
    """
    clean = dataset.clean[split]
    degraded = dataset.degraded[split]
    factor = clean.shape[-1] // degraded.shape[-1]
    if enhancer is not None:
        if enhancer.in_channels != clean.shape[1]:
            raise ModelConfigError("enhancer channel count does not match the dataset")
        expected = enhancer.factor if enhancer.role == "enhancer_sr" else 1
        if expected != factor:
            raise ModelConfigError(f"enhancer scale {expected} does not match dataset scale {factor}")
    enhanced = []
    for start in range(0, len(clean), _EVAL_CHUNK):
        chunk = degraded[start:start + _EVAL_CHUNK]
        if theta is None:
            enhanced.append(_upsample(chunk, factor))
        else:
            enhanced.append(predict(theta, chunk, enhancer))
    enhanced = np.clip(np.concatenate(enhanced), 0.0, 1.0)
    psnrs = [psnr(e, c) for e, c in zip(enhanced, clean)]
    ssims = [ssim(e, c) for e, c in zip(enhanced, clean)]
    acc, mi = float("nan"), float("nan")
    for phi, cfg in zip(phis, recognizers):
        if cfg.in_channels != clean.shape[1]:
            raise ModelConfigError("recognizer channel count does not match the dataset")
        logits = np.concatenate([predict(phi, enhanced[s:s + _EVAL_CHUNK], cfg)
                                 for s in range(0, len(enhanced), _EVAL_CHUNK)])
        if cfg.role == "classifier":
            acc = accuracy(logits, dataset.labels[split])
        else:
            mi = miou_from_confusion(confusion(logits, dataset.masks[split], cfg.n_classes))
    return MetricsRecord(psnr=float(np.mean(psnrs)), ssim=float(np.mean(ssims)), accuracy=acc,
                         miou=mi, n_samples=len(clean))


def evaluate(checkpoint, dataset: Dataset) -> MetricsRecord:
    """Evaluate a checkpoint directory written by :func:`run_experiment`."""
    root = Path(checkpoint)
    theta, enh = (None, None)
    if (root / "enhancer" / "manifest.txt").exists():
        theta, enh = load_checkpoint(root / "enhancer")
    phis, recs = [], []
    k = 0
    while (root / f"recognizer{k}" / "manifest.txt").exists():
        p, c = load_checkpoint(root / f"recognizer{k}")
        phis.append(p)
        recs.append(c)
        k += 1
    if theta is None and not phis:
        raise ModelConfigError(f"no checkpoint found under {root}")
    return evaluate_models(theta, enh, phis, recs, dataset)


def _fmt(v: float) -> str:
    return "" if isinstance(v, float) and np.isnan(v) else repr(float(v))


def format_metrics_csv(rows: list[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for seed, epoch, step, strategy, m in rows:
        w.writerow([seed, epoch, step, strategy, _fmt(m.psnr), _fmt(m.ssim), _fmt(m.accuracy),
                    _fmt(m.miou), m.n_samples])
    return buf.getvalue()


def _aggregate(per_seed: dict[int, MetricsRecord]):
    keys = ("psnr", "ssim", "accuracy", "miou")
    vals = {k: np.array([getattr(m, k) for _, m in sorted(per_seed.items())]) for k in keys}
    mean = {k: (None if np.all(np.isnan(v)) else float(np.mean(v))) for k, v in vals.items()}
    if len(per_seed) < 2:
        return mean, None
    std = {k: (None if np.all(np.isnan(v)) else float(np.std(v, ddof=1))) for k, v in vals.items()}
    return mean, std


def run_seed(cfg: ExperimentConfig, seed: int, dataset: Dataset | None = None,
             out_dir: Path | None = None):
    """Train and evaluate one seed; returns (state, records, metric rows)."""
    dataset = dataset or build_dataset(cfg)
    models = Models(cfg.enhancer(), cfg.recognizers())
    strategy = cfg.strategy_config()
    rows: list[tuple] = []

    def evaluate_state(state: TrainState):
        theta = state.theta if strategy.uses_enhancer else None
        enh = models.enhancer if strategy.uses_enhancer else None
        try:
            return evaluate_models(theta, enh, state.phi, models.recognizers, dataset)
        except NonFiniteError as exc:
            raise NumericalAbort(state.step, f"evaluation: {exc}") from exc

    def on_epoch(state: TrainState):
        if state.epoch % cfg.run.eval_interval == 0 or state.epoch == cfg.run.epochs:
            rows.append((seed, state.epoch, state.step, strategy.strategy, evaluate_state(state)))

    records: list[StepRecord] = []
    state, records = fit(dataset, models, strategy, cfg.optim_config(), cfg.run.epochs, seed,
                         augment_enabled=cfg.dataset.augment, crop_enabled=cfg.dataset.crop,
                         on_epoch=on_epoch)
    if cfg.run.epochs == 0:
        rows.append((seed, 0, 0, strategy.strategy, evaluate_state(state)))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "steps.csv").write_text(format_steps_csv(records))
        ck = out_dir / "checkpoint"
        if strategy.uses_enhancer:
            save_checkpoint(ck / "enhancer", state.theta, models.enhancer)
        for k, (phi, rc) in enumerate(zip(state.phi, models.recognizers)):
            save_checkpoint(ck / f"recognizer{k}", phi, rc)
    return state, records, rows


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunSummary:
    """Run every seed in ``cfg.run.seeds`` and write all artifacts.

    Files: ``config.txt``, ``manifest.json``, ``metrics.csv``, ``summary.json``,
    ``timing.txt`` and per seed ``seed_<n>/steps.csv`` plus checkpoints.
    """
    cfg.validate()
    out = Path(out_dir or cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    t0 = time.perf_counter()
    dataset = build_dataset(cfg)
    (out / "manifest.json").write_text(json.dumps(dataset.manifest(), indent=2, sort_keys=True) + "\n")
    per_seed, all_rows, aborted = {}, [], {}
    for seed in cfg.run.seeds:
        log.info("seed %d: %s / %s", seed, cfg.strategy.kind, cfg.dataset.degrade)
        try:
            _, _, rows = run_seed(cfg, seed, dataset, out / f"seed_{seed}")
        except NumericalAbort as exc:
            aborted[seed] = exc.step
            log.error("seed %d aborted at step %d", seed, exc.step)
            continue
        all_rows.extend(rows)
        per_seed[seed] = rows[-1][4]
    (out / "metrics.csv").write_text(format_metrics_csv(all_rows))
    mean, std = _aggregate(per_seed) if per_seed else ({}, None)
    summary = RunSummary(per_seed, mean, std, config_dict(cfg),
                         wall_clock=time.perf_counter() - t0, aborted=aborted)
    (out / "summary.json").write_text(summary.to_json())
    (out / "timing.txt").write_text(f"wall_clock_seconds {summary.wall_clock:.3f}\n")
    if aborted:
        raise NumericalAbort(min(aborted.values()), f"{len(aborted)} seed(s) aborted; see {out}/summary.json")
    return summary

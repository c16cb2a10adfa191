"""Paired-seed strategy comparison grid."""
from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..engine import read_steps_csv
from .config import ExperimentConfig, format_config, with_overrides
from .plots import cosine_histogram, emit_plots
from .runner import run_experiment

log = logging.getLogger(__name__)

COMPOSITE = "gaussian(0.3)+poisson(0.1)+blur(3,2.0)"
COMPARISON_COLUMNS = ("scenario", "degradation", "strategy", "gate_mode", "supervision",
                      "recognizer", "seed", "psnr", "ssim", "accuracy", "miou")


@dataclass(frozen=True)
class Cell:
    scenario: str
    strategy: str
    gate_mode: str
    supervision: str
    overrides: tuple

    @property
    def name(self) -> str:
        o = dict(self.overrides)
        tag = o.get("dataset.degrade", "").replace("(", "").replace(")", "").replace(",", "-").replace("+", "_")
        return f"{self.scenario}__{tag}__{self.strategy}_{self.gate_mode}_{self.supervision}"


def grid_cells(cfg: ExperimentConfig) -> list[Cell]:
    """Enumerate cells in a fixed order: noise, SR, composite, cross, multi-aux."""
    g = cfg.grid
    strategies = list(g.strategies) + (["none", "recognizer_only"] if g.baselines else [])

    def variants(scenario, extra):
        out = []
        for sup in g.supervision:
            for strat in strategies:
                modes = g.gate_modes if strat == "gradprom" else ["hard"]
                for mode in modes:
                    ov = dict(extra)
                    ov.update({"strategy.kind": strat, "strategy.gate_mode": mode,
                               "strategy.supervision": sup})
                    out.append(Cell(scenario, strat, mode, sup, tuple(sorted(ov.items()))))
        return out

    cells = []
    for sigma in g.sigmas:
        cells += variants("noise", {"dataset.degrade": f"gaussian({sigma:g})"})
    for f in g.sr_factors:
        cells += variants("sr", {"dataset.degrade": f"downsample({f})"})
    if g.composite:
        cells += variants("composite", {"dataset.degrade": COMPOSITE})
    if g.cross_distribution:
        cells += variants("cross_distribution", {"dataset.degrade": cfg.dataset.degrade,
                                                 "dataset.distribution": "A",
                                                 "dataset.eval_distribution": "B"})
    if g.multi_aux:
        cells += variants("multi_aux", {"dataset.degrade": cfg.dataset.degrade,
                                        "model.recognizer": "both"})
    return cells


def _run_cell(args):
    cfg, cell, root = args
    cell_cfg = with_overrides(cfg, dict(cell.overrides))
    summary = run_experiment(cell_cfg, Path(root) / "cells" / cell.name)
    return cell, {s: m for s, m in summary.per_seed.items()}


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))


def compare_strategies(cfg: ExperimentConfig, out_dir=None, jobs: int = 1) -> Path:
    """Run every grid cell over the shared seeds and write ``comparison.csv``.

    Every cell reuses ``dataset.seed`` and ``run.seeds``, so differences are
    seed-matched. Cells run in ``jobs`` worker processes; the merged output is
    ordered by cell and seed regardless of completion order.
    """
    cfg.validate()
    root = Path(out_dir or cfg.run.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.txt").write_text(format_config(cfg))
    cells = grid_cells(cfg)
    tasks = [(cfg, c, str(root)) for c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARISON_COLUMNS)
    for cell, per_seed in results:
        o = dict(cell.overrides)
        recog = o.get("model.recognizer", cfg.model.recognizer)
        for seed, m in sorted(per_seed.items()):
            w.writerow([cell.scenario, o.get("dataset.degrade", ""), cell.strategy, cell.gate_mode,
                        cell.supervision, recog, seed, _fmt(m.psnr), _fmt(m.ssim),
                        _fmt(m.accuracy), _fmt(m.miou)])
    (root / "comparison.csv").write_text(buf.getvalue())

    steps_files = sorted((root / "cells").glob("*/seed_*/steps.csv"))
    metrics_files = sorted((root / "cells").glob("*/metrics.csv"))
    emit_plots(steps_files + metrics_files, root / "plots")
    (root / "comparison_summary.json").write_text(
        json.dumps(summarize(results, root), indent=2, sort_keys=True) + "\n")
    return root / "comparison.csv"


def summarize(results, root: Path) -> dict:
    """Per-cell medians plus the directional ordering checks."""
    cells = {}
    groups = {}
    for cell, per_seed in results:
        psnrs = [m.psnr for _, m in sorted(per_seed.items())]
        steps = []
        for seed in sorted(per_seed):
            p = root / "cells" / cell.name / f"seed_{seed}" / "steps.csv"
            if p.exists():
                steps.extend(read_steps_csv(p))
        closed = sum(1 for r in steps if not r["gate_open"])
        cells[cell.name] = {
            "median_psnr": float(np.median(psnrs)) if psnrs else None,
            "median_ssim": float(np.median([m.ssim for m in per_seed.values()])) if psnrs else None,
            "closed_gate_steps": closed,
            "min_inner_product": min((r["inner_product_check"] for r in steps), default=None),
            "cosine_histogram": cosine_histogram([r["cosine_s"] for r in steps]).tolist(),
        }
        o = dict(cell.overrides)
        key = (cell.scenario, o.get("dataset.degrade", ""), cell.supervision)
        groups.setdefault(key, {})[f"{cell.strategy}_{cell.gate_mode}"] = cells[cell.name]
    trends = []
    for (scenario, deg, sup), strat in sorted(groups.items()):
        entry = {"scenario": scenario, "degradation": deg, "supervision": sup}
        gp, jt, fz = strat.get("gradprom_hard"), strat.get("joint_hard"), strat.get("frozen_hard")
        if gp and jt:
            entry["gradprom_minus_joint_db"] = gp["median_psnr"] - jt["median_psnr"]
            entry["gradprom_ge_joint_minus_0.1"] = bool(gp["median_psnr"] >= jt["median_psnr"] - 0.1)
        if gp and fz and jt:
            entry["full_ordering_holds"] = bool(gp["median_psnr"] >= fz["median_psnr"] >= jt["median_psnr"])
        trends.append(entry)
    return {"cells": cells, "trends": trends}

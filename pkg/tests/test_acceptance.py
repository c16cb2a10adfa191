"""Acceptance criteria 1-10, each printing one PASS/FAIL line.

Long-running: the directional grid trains 40 thirty-epoch runs. Dataset sizes
for the grid are reduced from the defaults (see the decisions ledger); epochs,
batch size, learning rate and lambda keep their defaults.
"""
import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from gradprom.engine import (StrategyConfig, OptimConfig, combine_gradients, combined_loss_gradient,
                             compute_task_gradients, fit, init_state,
                             read_steps_csv)
from gradprom.harness.cli import main as cli_main
from gradprom.harness.compare import compare_strategies
from gradprom.harness.config import parse_config_text
from gradprom.harness.gradcheck import run_battery
from gradprom.harness.runner import build_dataset, evaluate_models
from gradprom.metrics import miou, psnr, ssim
from gradprom.models import enhancer_config, init_params
from gradprom.synthdata import DegradeConfig, degrade

from conftest import batch_from, small_dataset, small_models

pytestmark = pytest.mark.acceptance


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}")
    assert ok, detail


# ------------------------------------------------------------------ shared grid

GRID_CONFIG = """
[dataset]
n_train = 64
n_eval = 32
degrade = gaussian(0.3)
[run]
epochs = 30
eval_interval = 5
seeds = 0, 1, 2, 3, 4
[grid]
strategies = joint, frozen, gradprom
supervision = unsupervised, supervised
gate_modes = hard, cosine
sigmas = 0.3
sr_factors =
composite = false
cross_distribution = false
multi_aux = false
"""


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    t0 = time.perf_counter()
    compare_strategies(parse_config_text(GRID_CONFIG), out)
    return out, time.perf_counter() - t0


def _rows(path):
    import csv
    with open(path) as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ criteria

def test_criterion_01_gradcheck_battery(capsys):
    t0 = time.perf_counter()
    results = run_battery(n_seeds=50)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_error)
    ok = all(r.passed for r in results) and elapsed < 120
    report(capsys, 1, ok, f"{len(results)} cases x 50 seeds, worst {worst.name} "
                          f"{worst.max_error:.2e} < 1e-6, {elapsed:.1f}s < 120s")


def test_criterion_02_gate_unit_suite(capsys):
    rng = np.random.default_rng(2)
    conflict_ok = aligned_ok = True
    worst_scaled = 0.0
    invariant = True
    for _ in range(1000):
        g_ip, g_vr = rng.standard_normal(40), rng.standard_normal(40)
        lam = float(rng.uniform(0, 2))
        d, s, gate = combine_gradients(g_ip, g_vr, lam, "hard")
        if s < 0:
            conflict_ok &= d.tobytes() == g_ip.tobytes() and not gate
        else:
            aligned_ok &= d.tobytes() == (g_ip + lam * g_vr).tobytes() and gate
        dc, _, _ = combine_gradients(g_ip, g_vr, lam, "cosine")
        s_ref = float(g_ip @ g_vr) / (np.linalg.norm(g_ip) * np.linalg.norm(g_vr))
        worst_scaled = max(worst_scaled, float(np.max(np.abs(dc - (g_ip + lam * g_vr * max(0.0, s_ref))))))
        a, b = rng.uniform(1e-3, 1e3, size=2)
        _, _, gate2 = combine_gradients(a * g_ip, b * g_vr, lam, "hard")
        invariant &= gate2 == gate
    ok = conflict_ok and aligned_ok and worst_scaled < 1e-12 and invariant
    report(capsys, 2, ok, f"conflict bitwise={conflict_ok}, aligned exact={aligned_ok}, "
                          f"cosine-scaled max err {worst_scaled:.1e} < 1e-12, rescale-invariant={invariant}")


def test_criterion_03_descent_property(grid, capsys):
    out, _ = grid
    cells = sorted((out / "cells").glob("*gradprom_*"))
    combos, worst, n_steps = set(), np.inf, 0
    for cell in cells:
        for steps in sorted(cell.glob("seed_*/steps.csv")):
            rows = read_steps_csv(steps)
            n_steps += len(rows)
            combos.add((rows[0]["gate_mode"], rows[0]["supervision"]))
            worst = min(worst, min(r["inner_product_check"] for r in rows))
    ok = len(combos) == 4 and worst >= -1e-9
    report(capsys, 3, ok, f"{len(combos)} (gate mode, supervision) settings, {n_steps} steps, "
                          f"min <d, g_ip> = {worst:.3e} >= -1e-9")


def test_criterion_04_decomposition_oracle(capsys):
    worst = 0.0
    pairs = 0
    data = small_dataset(n_train=40)
    for k in range(20):
        recognizer = ("classifier", "segmenter", "both")[k % 3]
        supervision = ("supervised", "unsupervised")[k % 2]
        models = small_models(recognizer, channels=8)
        strat = StrategyConfig(supervision=supervision, lam=float(10.0 ** -(k % 5)))
        state = init_state(models, 100 + k)
        batch = batch_from(data, (2 * k) % 36, 4)
        tg = compute_task_gradients(state, batch, strat, models)
        two_pass = tg.g_ip + strat.lam * sum(tg.g_vr_theta)
        single = combined_loss_gradient(state, batch, strat, models)
        nz = single != 0
        rel = np.abs(two_pass[nz] - single[nz]) / np.abs(single[nz])
        assert np.all(two_pass[~nz] == 0)
        worst = max(worst, float(rel.max()))
        pairs += 1
    report(capsys, 4, worst < 1e-10, f"{pairs} (state, batch) pairs, max elementwise rel err {worst:.2e} < 1e-10")


def test_criterion_05_strategy_equivalence(capsys):
    data = small_dataset(n_train=16)
    models = small_models()
    opt = OptimConfig(batch_size=8)
    gp, gp_recs = fit(data, models, StrategyConfig(lam=0.0), opt, 3, seed=0)
    none, none_recs = fit(data, models, StrategyConfig(strategy="none"), opt, 3, seed=0)
    lam0 = (gp.theta.equals(none.theta)
            and [r.loss_ip for r in gp_recs] == [r.loss_ip for r in none_recs])
    # find a run whose gates stayed open at every step, then replay it as joint training
    found = None
    for seed in range(200):
        for sup in ("unsupervised", "supervised"):
            s = StrategyConfig(supervision=sup)
            state, recs = fit(data, models, s, opt, 2, seed=seed)
            if all(r.gate_open for r in recs):
                found = (seed, sup, state, recs)
                break
        if found:
            break
    if found is None:
        report(capsys, 5, False, f"lambda=0 bit-identical={lam0}; no all-open run found in 400 tries")
    seed, sup, gp_state, gp_run = found
    joint, joint_run = fit(data, models, StrategyConfig(strategy="joint", supervision=sup), opt, 2, seed=seed)
    same = (gp_state.theta.equals(joint.theta) and gp_state.phi[0].equals(joint.phi[0])
            and [r.loss_ip for r in gp_run] == [r.loss_ip for r in joint_run])
    n = len(gp_run)
    report(capsys, 5, lam0 and same, f"lambda=0 vs enhancer-only bit-identical={lam0}; all-open run "
                                     f"(seed {seed}, {sup}, {n} steps) vs joint bit-identical={same}")


def test_criterion_06_metric_oracles(capsys):
    p = psnr(np.full((32, 32), 0.5), np.full((32, 32), 0.6))
    x = np.random.default_rng(6).uniform(size=(32, 32))
    s_id = ssim(x, x)
    s_c = ssim(np.zeros((32, 32)), np.ones((32, 32)))
    gt = np.array([[[0, 1], [0, 1]]])
    logits = np.zeros((1, 2, 2, 2))
    logits[:, 0] = 1.0
    m = miou(logits, gt)
    cfg = parse_config_text("dataset.degrade = gaussian(0.1)")
    data = build_dataset(cfg)
    enh = enhancer_config("denoise")
    theta = init_params(enh, 0)
    ident = evaluate_models(theta.with_flat(np.zeros(theta.size)), enh, [], [], data).psnr
    ok = (abs(p - 20.0) < 1e-9 and abs(s_id - 1.0) < 1e-12 and abs(s_c - 1e-4 / (1 + 1e-4)) < 1e-9
          and m == 0.25 and abs(ident - 20.0) < 0.5)
    report(capsys, 6, ok, f"PSNR {p:.12f}, SSIM(x,x) {s_id:.15f}, SSIM(0,1) {s_c:.6e}, "
                          f"mIoU {m}, identity PSNR at sigma 0.1 {ident:.3f} dB")


def test_criterion_07_noise_statistics(capsys):
    x = np.full((1000, 1000), 0.5)
    g = degrade(x, DegradeConfig("gaussian", sigma=0.1), 7)
    g_err = abs((g - x).std() / 0.1 - 1.0)
    pois = degrade(x, DegradeConfig("poisson", rate=0.1), 7)
    p_err = abs(pois.var() / 0.05 - 1.0)
    ok = g_err < 0.02 and p_err < 0.05
    report(capsys, 7, ok, f"gaussian std rel err {g_err:.4f} < 0.02; poisson var {pois.var():.5f} vs "
                          f"0.05, rel err {p_err:.4f} < 0.05 (clamp to [0,1] truncates counts above 10)")


def test_criterion_08_training_smoke(capsys):
    cfg = parse_config_text("""
        dataset.degrade = gaussian(0.3)
        strategy.kind = none
        run.epochs = 30
    """)
    data = build_dataset(cfg)
    from gradprom.engine import Models
    models = Models(cfg.enhancer(), cfg.recognizers())
    base = evaluate_models(None, None, [], [], data).psnr
    gains, times = [], []
    for seed in range(5):
        t0 = time.perf_counter()
        state, _ = fit(data, models, cfg.strategy_config(), cfg.optim_config(), 30, seed)
        after = evaluate_models(state.theta, models.enhancer, [], [], data).psnr
        times.append(time.perf_counter() - t0)
        gains.append(after - base)
    med = float(np.median(gains))
    ok = med >= 1.0 and max(times) < 300
    report(capsys, 8, ok, f"degraded input {base:.2f} dB, median gain {med:.2f} dB >= 1.0 over 5 seeds "
                          f"(n_train 512, n_eval 128), slowest seed {max(times):.0f}s < 300s")


def test_criterion_09_directional_trend(grid, capsys):
    out, elapsed = grid
    rows = _rows(out / "comparison.csv")

    def med(strategy, sup, gate="hard"):
        return float(np.median([float(r["psnr"]) for r in rows if r["strategy"] == strategy
                                and r["supervision"] == sup and r["gate_mode"] == gate]))

    parts, ok = [], True
    for sup in ("unsupervised", "supervised"):
        gp, jt, fz = med("gradprom", sup), med("joint", sup), med("frozen", sup)
        ok &= gp >= jt - 0.1
        order = gp >= fz >= jt
        parts.append(f"{sup}: gradprom {gp:.4f} vs joint {jt:.4f} (frozen {fz:.4f}, full order {order})")
    closed = 0
    for steps in (out / "cells").glob("*gradprom_hard*/seed_*/steps.csv"):
        closed += sum(1 for r in read_steps_csv(steps) if not r["gate_open"])
    ok &= closed > 0
    report(capsys, 9, ok, "; ".join(parts) + f"; closed-gate steps {closed}; grid {elapsed:.0f}s")


def _digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.suffix in (".csv", ".json", ".svg")}


def test_criterion_10_compare_determinism(tmp_path, capsys):
    cfg = tmp_path / "small.cfg"
    cfg.write_text("""
[dataset]
n_train = 8
n_eval = 4
[model]
enhancer_channels = 4
recognizer_channels = 4
[optim]
batch_size = 4
[run]
epochs = 1
seeds = 0, 1
[grid]
sigmas = 0.1, 0.3
sr_factors = 2
supervision = supervised
""")
    out = tmp_path / "cmp"
    assert cli_main(["compare", "--config", str(cfg), "--out", str(out)]) == 0
    first = _digest(out)
    assert cli_main(["compare", "--config", str(cfg), "--out", str(out), "--jobs", "2"]) == 0
    second = _digest(out)
    same = first == second and len(first) > 0
    report(capsys, 10, same, f"{len(first)} CSV/JSON/SVG files byte-identical across two invocations "
                             f"(second with --jobs 2)")

"""Dependency-free SVG plots from steps.csv / metrics.csv files."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from ..engine import STEPS_COLUMNS
from .runner import METRICS_COLUMNS

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=150, top=40, bottom=50)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")
HIST_EDGES = np.round(np.linspace(-1.0, 1.0, 21), 10)


class PlotError(ValueError):
    pass


def _n(v: float) -> str:
    return f"{v:.2f}"


class _Axes:
    def __init__(self, title, xlabel, ylabel, xlim, ylim):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        x0, x1 = xlim
        y0, y1 = ylim
        if x1 <= x0:
            x1 = x0 + 1.0
        if y1 <= y0:
            y1 = y0 + 1.0
        self.xlim, self.ylim = (x0, x1), (y0, y1)
        self.body: list[str] = []

    @property
    def _box(self):
        return (MARGIN["left"], MARGIN["top"], WIDTH - MARGIN["right"], HEIGHT - MARGIN["bottom"])

    def sx(self, x):
        l, _, r, _ = self._box
        return l + (x - self.xlim[0]) / (self.xlim[1] - self.xlim[0]) * (r - l)

    def sy(self, y):
        _, t, _, b = self._box
        return b - (y - self.ylim[0]) / (self.ylim[1] - self.ylim[0]) * (b - t)

    def line(self, xs, ys, color, label, index):
        pts = " ".join(f"{_n(self.sx(x))},{_n(self.sy(y))}" for x, y in zip(xs, ys))
        self.body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        self._legend(color, label, index)

    def bars(self, edges, counts, color):
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            if c <= 0:
                continue
            x, w = self.sx(lo), self.sx(hi) - self.sx(lo)
            y = self.sy(c)
            self.body.append(f'<rect x="{_n(x)}" y="{_n(y)}" width="{_n(w)}" '
                             f'height="{_n(self.sy(0) - y)}" fill="{color}" stroke="#333" stroke-width="0.5"/>')

    def _legend(self, color, label, index):
        x = WIDTH - MARGIN["right"] + 12
        y = MARGIN["top"] + 14 + 18 * index
        self.body.append(f'<line x1="{x}" y1="{y - 4}" x2="{x + 20}" y2="{y - 4}" stroke="{color}" stroke-width="2"/>')
        self.body.append(f'<text x="{x + 26}" y="{y}" font-size="11">{escape(label)}</text>')

    def render(self) -> str:
        l, t, r, b = self._box
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
               f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">',
               f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
               f'<text x="{(l + r) / 2:.1f}" y="22" font-size="14" text-anchor="middle">{escape(self.title)}</text>',
               f'<rect x="{l}" y="{t}" width="{r - l}" height="{b - t}" fill="none" stroke="black"/>']
        for i in range(5):
            fx = self.xlim[0] + (self.xlim[1] - self.xlim[0]) * i / 4
            fy = self.ylim[0] + (self.ylim[1] - self.ylim[0]) * i / 4
            out.append(f'<text x="{_n(self.sx(fx))}" y="{b + 16}" font-size="10" text-anchor="middle">{fx:.4g}</text>')
            out.append(f'<text x="{l - 6}" y="{_n(self.sy(fy) + 3)}" font-size="10" text-anchor="end">{fy:.4g}</text>')
        out.append(f'<text x="{(l + r) / 2:.1f}" y="{HEIGHT - 10}" font-size="12" text-anchor="middle">{escape(self.xlabel)}</text>')
        out.append(f'<text x="16" y="{(t + b) / 2:.1f}" font-size="12" text-anchor="middle" '
                   f'transform="rotate(-90 16 {(t + b) / 2:.1f})">{escape(self.ylabel)}</text>')
        out.extend(self.body)
        out.append("</svg>")
        return "\n".join(out) + "\n"


def _read(path) -> tuple[str, list[dict]]:
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        return "empty", []
    reader = csv.DictReader(lines)
    header = tuple(reader.fieldnames or ())
    if header == STEPS_COLUMNS:
        kind = "steps"
    elif header == METRICS_COLUMNS:
        kind = "metrics"
    else:
        raise PlotError(f"{path}: unrecognised CSV header")
    rows = list(reader)
    try:
        if kind == "steps":
            for r in rows:
                r["step"], r["epoch"] = int(r["step"]), int(r["epoch"])
                r["loss_ip"], r["cosine_s"] = float(r["loss_ip"]), float(r["cosine_s"])
                if r["gate_open"] not in ("0", "1"):
                    raise ValueError(r["gate_open"])
                r["gate_open"] = r["gate_open"] == "1"
        else:
            for r in rows:
                r["step"], r["epoch"] = int(r["step"]), int(r["epoch"])
                r["psnr"] = float(r["psnr"]) if r["psnr"] else float("nan")
    except (KeyError, ValueError, TypeError) as exc:
        raise PlotError(f"{path}: malformed row ({exc})") from None
    return kind, rows


def _mean_curve(runs: list[list[tuple[float, float]]]):
    by_x = defaultdict(list)
    for run in runs:
        for x, y in run:
            by_x[x].append(y)
    xs = sorted(by_x)
    return xs, [float(np.mean(by_x[x])) for x in xs]


def _line_plot(title, xlabel, ylabel, curves: dict[str, tuple[list, list]]) -> str:
    xs_all = [x for xs, _ in curves.values() for x in xs]
    ys_all = [y for _, ys in curves.values() for y in ys if np.isfinite(y)]
    xlim = (min(xs_all), max(xs_all)) if xs_all else (0.0, 1.0)
    ylim = (min(ys_all), max(ys_all)) if ys_all else (0.0, 1.0)
    ax = _Axes(title, xlabel, ylabel, xlim, ylim)
    for i, (label, (xs, ys)) in enumerate(sorted(curves.items())):
        ax.line(xs, ys, PALETTE[i % len(PALETTE)], label, i)
    return ax.render()


def cosine_histogram(values) -> np.ndarray:
    """Counts in 20 fixed bins of width 0.1 over [-1, 1]."""
    v = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    counts, _ = np.histogram(v, bins=HIST_EDGES)
    return counts


def emit_plots(csv_paths, out_dir) -> list[Path]:
    """Write loss, PSNR, cosine-histogram and gate-fraction SVGs; returns paths."""
    steps_runs = defaultdict(list)
    metric_runs = defaultdict(list)
    cosines = []
    gates = defaultdict(lambda: defaultdict(list))
    for path in csv_paths:
        kind, rows = _read(path)
        if kind == "steps":
            per_strategy = defaultdict(list)
            for r in rows:
                per_strategy[r["strategy"]].append((r["step"], r["loss_ip"]))
                if r["strategy"] in ("joint", "frozen", "gradprom"):
                    cosines.append(r["cosine_s"])
                    gates[r["strategy"]][r["epoch"]].append(1.0 if r["gate_open"] else 0.0)
            for s, pts in per_strategy.items():
                steps_runs[s].append(pts)
        elif kind == "metrics":
            per = defaultdict(list)
            for r in rows:
                per[(r["strategy"], r["seed"])].append((r["step"], r["psnr"]))
            for (s, _), pts in per.items():
                metric_runs[s].append(pts)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "loss_ip.svg": _line_plot("Enhancement loss", "step", "loss_ip",
                                  {s: _mean_curve(r) for s, r in steps_runs.items()}),
        "psnr.svg": _line_plot("Evaluation PSNR", "step", "PSNR (dB)",
                               {s: _mean_curve(r) for s, r in metric_runs.items()}),
        "gate_fraction.svg": _line_plot(
            "Gate-open fraction", "epoch", "fraction open",
            {s: (sorted(e), [float(np.mean(e[k])) for k in sorted(e)]) for s, e in gates.items()}),
    }
    counts = cosine_histogram(cosines)
    ax = _Axes("Cosine similarity of task gradients", "cosine_s", "steps", (-1.0, 1.0),
               (0.0, float(max(1, counts.max(initial=0)))))
    ax.bars(HIST_EDGES, counts, PALETTE[0])
    files["cosine_hist.svg"] = ax.render()
    written = []
    for name, svg in files.items():
        (out / name).write_text(svg)
        written.append(out / name)
    return written

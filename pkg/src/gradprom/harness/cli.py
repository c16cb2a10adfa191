"""``gradprom`` command line: generate, train, eval, compare, gradcheck, plot."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..engine import NumericalAbort
from ..models import ConfigError as ModelConfigError
from ..synthdata import save_dataset
from .config import ConfigError, ExperimentConfig, parse_config, with_overrides

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("gradprom")


def _load(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig().validate()
    over = {}
    if getattr(args, "out", None):
        over["run.out_dir"] = args.out
    if getattr(args, "seed", None) is not None:
        over[args.seed_key] = [args.seed] if args.seed_key == "run.seeds" else args.seed
    return with_overrides(cfg, over) if over else cfg


def cmd_generate(args) -> int:
    from .runner import build_dataset
    cfg = _load(args)
    root = save_dataset(build_dataset(cfg), cfg.run.out_dir)
    print(f"wrote dataset to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .runner import run_experiment
    cfg = _load(args)
    summary = run_experiment(cfg)
    print(json.dumps({"out_dir": cfg.run.out_dir, "mean": summary.mean, "std": summary.std},
                     sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .runner import build_dataset, evaluate
    cfg = _load(args)
    record = evaluate(args.checkpoint, build_dataset(cfg))
    text = json.dumps({k: (None if v != v else v) for k, v in record.as_dict().items()},
                      indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    from .compare import compare_strategies
    cfg = _load(args)
    path = compare_strategies(cfg, cfg.run.out_dir, jobs=args.jobs)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import main_battery
    ok, text = main_battery(args.seeds)
    sys.stdout.write(text)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_plot(args) -> int:
    from .plots import emit_plots
    for p in emit_plots(args.csv, args.out or "plots"):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradprom", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_key, seed_help):
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int, metavar="N", help=seed_help)
        p.add_argument("--out", metavar="DIR")
        p.set_defaults(seed_key=seed_key)

    p = sub.add_parser("generate", help="write a synthetic dataset to disk")
    common(p, "dataset.seed", "dataset seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run one experiment over the configured seeds")
    common(p, "run.seeds", "train a single seed instead of run.seeds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint directory")
    common(p, "dataset.seed", "dataset seed")
    p.add_argument("--checkpoint", required=True, metavar="DIR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="run the paired-seed strategy grid")
    common(p, "run.seeds", "run a single seed instead of run.seeds")
    p.add_argument("--jobs", type=int, default=1, metavar="N")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference autodiff battery")
    p.add_argument("--seeds", type=int, default=50, metavar="N")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", help="SVG plots from steps.csv / metrics.csv files")
    p.add_argument("csv", nargs="*")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    from .plots import PlotError
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, ModelConfigError, PlotError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

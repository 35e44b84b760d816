"""Command-line entry point: ``headdiv {train,gradsim,analyze,heatmap,compare}``."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from . import analysis
from .config import ConfigError, DEFAULTS, config_from_dict, describe_keys, load_config
from .diversity import DiversityKind
from .training import TrainConfig, TrainingDiverged, make_splits, measure_diversity, train, with_overrides

log = logging.getLogger("headdiv")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_ARTIFACT = 4
EXIT_NONFINITE = 5

_CONFIG_HELP = "config keys (JSON object, all optional) and defaults:\n" + describe_keys()


def _load(args) -> TrainConfig:
    if args.config is None:
        return config_from_dict({}, seed=args.seed)
    return load_config(args.config, seed=args.seed)


def _parse_lambdas(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--lambdas: cannot parse {text!r}") from None
    if not values:
        raise ConfigError("--lambdas: need at least one value")
    if any(v < 0 or not math.isfinite(v) for v in values):
        raise ConfigError("--lambdas: values must be finite and >= 0")
    return values


def _finite(run) -> bool:
    vals = [run.grad_similarity]
    for m in run.metrics:
        vals += [m.task_loss, m.eval_accuracy, *m.diversity.values()]
    return all(math.isfinite(v) for v in vals)


def cmd_train(args) -> int:
    cfg = _load(args)
    run = train(cfg)
    if not _finite(run):
        print("error: non-finite metric in run output", file=sys.stderr)
        return EXIT_NONFINITE
    out = analysis.write_run(run, args.out)
    last = run.metrics[-1]
    print(f"wrote {out}: eval accuracy {last.eval_accuracy:.4f}, "
          f"grad similarity {run.grad_similarity:.6f}")
    return EXIT_OK


def cmd_gradsim(args) -> int:
    cfg = _load(args)
    lambdas = _parse_lambdas(args.lambdas)
    kind = cfg.diversity_kind or DiversityKind.QUERY
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for lam in lambdas:
        run = train(with_overrides(cfg, diversity_kind=kind, lam=lam))
        if not _finite(run):
            print(f"error: non-finite metric for lambda={lam}", file=sys.stderr)
            return EXIT_NONFINITE
        analysis.write_run(run, out / f"lambda_{lam!r}")
        rows.append((lam, run.grad_similarity))
        print(f"lambda={lam!r}: grad similarity {run.grad_similarity:.6f}")
    analysis.export_gradsim_csv(rows, out / "gradsim.csv", with_overrides(cfg, diversity_kind=kind))
    return EXIT_OK


def _recompute_report(run_dir: Path):
    run = analysis.load_run(run_dir)
    cfg = run.config
    _, (x_eval, _) = make_splits(cfg.task, cfg.seed)
    return cfg, measure_diversity(run.params, x_eval, cfg.scale_mode)


def cmd_analyze(args) -> int:
    run_dir = Path(args.run_dir)
    cfg, report = _recompute_report(run_dir)
    analysis.export_report_csv(report, run_dir / "report.csv", cfg)
    sys.stdout.write(analysis.report_csv_text(report, analysis.provenance(cfg)))
    return EXIT_OK


def cmd_heatmap(args) -> int:
    run_dir = Path(args.run_dir)
    cfg, report = _recompute_report(run_dir)
    for path in analysis.write_heatmaps(report, run_dir, cfg):
        print(path)
    return EXIT_OK


def cmd_compare(args) -> int:
    a = analysis.load_run(args.run_a)
    b = analysis.load_run(args.run_b)
    try:
        cmp = analysis.compare_runs(a, b)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    sys.stdout.write(cmp.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(cmp.to_csv())
        (out / "comparison.txt").write_text(cmp.to_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(
        prog="headdiv", formatter_class=fmt,
        description="Attention-head diversity experiments on a synthetic sequence task.",
        epilog=_CONFIG_HELP,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="JSON config file (defaults used when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("train", help="train one model and write its run directory",
                       formatter_class=fmt, epilog=_CONFIG_HELP)
    config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradsim", help="train one model per lambda, write gradsim.csv",
                       formatter_class=fmt, epilog=_CONFIG_HELP)
    config_args(p)
    p.add_argument("--lambdas", default="0,0.001,1.0",
                   help="comma-separated diversity weights (default: 0,0.001,1.0); "
                        "the diversity kind defaults to Q when the config sets none")
    p.set_defaults(func=cmd_gradsim)

    p = sub.add_parser("analyze", help="recompute report.csv from a saved run",
                       formatter_class=fmt, epilog=_CONFIG_HELP)
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("heatmap", help="recompute similarity heatmaps from a saved run",
                       formatter_class=fmt, epilog=_CONFIG_HELP)
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("compare", help="compare two saved runs (ratios are a / b)",
                       formatter_class=fmt, epilog=_CONFIG_HELP)
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--out", help="also write comparison.csv and comparison.txt here")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        parser.print_usage(sys.stderr)
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as e:
        print(f"error: training diverged at step {e.step}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as e:
        # includes analysis.ArtifactError
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: train, eval, sweep, gradcheck, plot.

Exit codes: 0 success, 1 usage or config error, 2 numeric failure (NaN loss or
gradcheck mismatch), 3 I/O or input-file error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import checkpoint as ckpt_io
from .config import RunConfig, apply_overrides, load_config
from .errors import ConfigError, ManifestError, NumericError
from .plots import PlotInputError, write_plots

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("dcformer")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which we reserve for numeric failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _parse_sets(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    values = _parse_sets(args.set)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if getattr(args, "out", None):
        values["out"] = args.out
    return apply_overrides(cfg, values)


def _print_table(report) -> None:
    from .reports import report_summary

    names = list(report.rows)
    print("embedding   " + "  ".join(f"{n:>8}" for n in names))
    print("mAP         " + "  ".join(f"{report.rows[n].mAP:8.4f}" for n in names))
    print("rank-1      " + "  ".join(f"{report.rows[n].rank(1):8.4f}" for n in names))
    s = report_summary(report)
    print(f"token cosine (mean off-diagonal) {s['token_cosine']:.4f}; confusion {s['confusion']}")


def cmd_train(args) -> int:
    from .train import train

    cfg = build_config(args)
    resume = None
    if args.resume:
        resume = ckpt_io.load(args.resume)
    out = Path(cfg.out)
    res = train(cfg, out_dir=out, resume=resume, evaluate=not args.no_eval)
    write_plots([out / "metrics.csv"] + ([out / "distances.csv", out / "projection.csv"]
                                        if res.report is not None else []), out / "plots")
    print(f"trained {res.steps} steps -> {out}")
    if res.report is not None:
        _print_table(res.report)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import generate, load_dataset, read_market_folder
    from .reports import write_eval_artifacts
    from .train import evaluate_state, load_for_eval

    cfg, state = load_for_eval(args.checkpoint)
    if args.dataset:
        dataset = load_dataset(args.dataset)
    elif args.market:
        dataset = read_market_folder(args.market, cfg.model.image_height, cfg.model.image_width)
    else:
        dataset = generate(cfg.data, cfg.data_seed)
    report = evaluate_state(cfg, state, dataset)
    out = Path(args.out or Path(args.checkpoint).parent / "eval")
    paths = write_eval_artifacts(report, out)
    write_plots([p for k, p in paths.items() if k != "report"], out / "plots")
    _print_table(report)
    print(f"report -> {paths['report']}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .sweep import parse_value, run_sweep

    cfg = build_config(args)
    values = [parse_value(args.axis, v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    out = Path(args.out or cfg.out)
    rows = run_sweep(cfg, args.axis, values, seeds, out_dir=out, workers=args.workers,
                     evaluate=not args.no_eval)
    for r in rows:
        m = r.metrics
        extra = "" if r.status == "ok" else f" ({r.error})"
        print(f"{args.axis}={r.value:g} seed={r.seed} {r.status}{extra} "
              + " ".join(f"{k}={m[k]:.4f}" for k in ("mAP", "final_sdc", "max_nu") if k in m))
    print(f"sweep -> {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(tol=args.tol, step=args.step, include_model=not args.skip_model)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed at tol={args.tol:g}")
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_plot(args) -> int:
    written = write_plots(args.inputs, args.out)
    for p in written:
        print(p)
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dcformer", description="Multi-class-token ViT re-ID toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_flags(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--no-eval", action="store_true", help="skip the final evaluation")

    t = sub.add_parser("train", help="train one model")
    run_flags(t)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--out")
    src = e.add_mutually_exclusive_group()
    src.add_argument("--dataset", help="directory written by dump_dataset")
    src.add_argument("--market", help="Market-1501 style folder")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="one run per value of an ablation axis")
    run_flags(s)
    s.add_argument("--axis", required=True, choices=["lambda", "num_tokens", "dwc", "identity_fraction"])
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    s.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    s.set_defaults(func=cmd_sweep)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--step", type=float, default=1e-5)
    g.add_argument("--skip-model", action="store_true", help="ops and losses only")
    g.set_defaults(func=cmd_gradcheck)

    pl = sub.add_parser("plot", help="render SVG figures from CSV outputs")
    pl.add_argument("inputs", nargs="+")
    pl.add_argument("--out", default="plots")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ManifestError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, PlotInputError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

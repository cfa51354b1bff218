"""Command line entry point.

    mamlrk run CONFIG [--seed N] [--tableau NAME|generic:x] [--mode evaluate|differentiate] [--out DIR]
    mamlrk compare CONFIG --tableaus midpoint,heun,ralston,itb [--seed N] [--out DIR]
    mamlrk order-check [--field linear|nonlinear|forced] [--tableaus ...] [--out DIR]

Exit status: 0 on success, 1 for configuration errors, 2 for numeric failures.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .. import diffengine as ad
from ..rkmeta import ConfigurationError, PRESET_NAMES
from .config import ExperimentConfig, load_config
from .experiments import TrainingDiverged, run_experiment, run_order_check
from .report import emit_comparison, emit_order_check, emit_results

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
ORDER_CHECK_TABLEAUS = (*PRESET_NAMES, "generic:0.3", "generic:2.0", "rk4")

log = logging.getLogger("mamlrk")


def _progress(every: int):
    def report(it, metric):
        if every and (it + 1) % every == 0:
            log.info("iteration %d: train metric %.4f", it + 1, metric)

    return report


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    cfg = cfg.with_overrides(seed=args.seed, tableau=args.tableau, mode=getattr(args, "mode", None))
    if args.out is not None:
        cfg = cfg.with_overrides(out_dir=str(args.out))
    return cfg.resolved()


def cmd_run(args) -> int:
    cfg = _load(args)
    record = run_experiment(cfg, _progress(args.log_every))
    paths = emit_results(record)
    print(f"config_hash {cfg.hash()}")
    print(f"step,{record.metric}_mean,{record.metric}_std")
    for i, (m, s) in enumerate(zip(record.curve_mean, record.curve_std)):
        print(f"{i},{m:.6g},{s:.6g}")
    print(f"wrote {paths['curve_csv']} and {paths['svg']} ({record.wall_clock:.1f} s)")
    return EXIT_OK


def cmd_compare(args) -> int:
    base = _load(args)
    names = [n.strip() for n in args.tableaus.split(",") if n.strip()]
    if not names:
        raise ConfigurationError("--tableaus needs at least one name")
    records = []
    for name in names:
        cfg = base.with_overrides(tableau=name, out_dir=str(Path(base.out_dir) / name.replace(":", "_")))
        cfg = cfg.resolved()
        log.info("running %s", name)
        rec = run_experiment(cfg, _progress(args.log_every))
        emit_results(rec)
        records.append(rec)
    paths = emit_comparison(records, base.out_dir)
    width = max(len(n) for n in names)
    metric = records[0].metric
    print(f"{'tableau':<{width}}  {'step 0':>10}  {'final':>10}  {'std':>10}")
    for r in records:
        print(
            f"{r.config.tableau:<{width}}  {r.curve_mean[0]:>10.4g}  {r.final:>10.4g}  {r.curve_std[-1]:>10.4g}"
        )
    print(f"metric: {metric}; wrote {paths['csv']} and {paths['svg']}")
    return EXIT_OK


def cmd_order_check(args) -> int:
    names = [n.strip() for n in args.tableaus.split(",")] if args.tableaus else list(ORDER_CHECK_TABLEAUS)
    cfg = ExperimentConfig(experiment="order_check", field=args.field, out_dir=str(args.out)).resolved()
    results = run_order_check(cfg, names)
    paths = emit_order_check(results, cfg.out_dir, cfg.hash(), cfg.field)
    for name, res in results.items():
        print(f"{name:<14} {res.order:6.3f}")
    print(f"wrote {paths['orders']} and {paths['svg']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mamlrk", description="Runge-Kutta meta-learning experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_mode=True):
        sp.add_argument("config", type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
        sp.add_argument("--log-every", type=int, default=100)
        if with_mode:
            sp.add_argument("--mode", choices=("evaluate", "differentiate"))

    run = sub.add_parser("run", help="train and evaluate one configuration")
    common(run)
    run.add_argument("--tableau", help="preset name or generic:x")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="run several tableaus with the same budget")
    common(cmp_)
    cmp_.add_argument("--tableaus", required=True, help="comma-separated tableau names")
    cmp_.set_defaults(func=cmd_compare, tableau=None)

    oc = sub.add_parser("order-check", help="fit local-error exponents on an analytic field")
    oc.add_argument("--field", default="linear", choices=("linear", "nonlinear", "forced"))
    oc.add_argument("--tableaus", help="comma-separated tableau names (default: all presets)")
    oc.add_argument("--out", type=Path, default=Path("results/order_check"))
    oc.set_defaults(func=cmd_order_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr
    )
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, ad.NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

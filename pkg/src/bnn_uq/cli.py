"""Command-line entry point: ``bnn-uq {gen-data,run,report,plot,replay}``.

Exit codes: 0 success, 1 run failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from bnn_uq import datasets, experiment, metrics, plotting

log = logging.getLogger("bnn_uq")

EXIT_OK, EXIT_RUN_FAILURE, EXIT_CONFIG = 0, 1, 2


def _add_common(p):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--preset", help="named preset, e.g. reg1-hmc")
    p.add_argument("--seed", type=int, help="master seed for the run")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnn-uq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen-data", help="write a generated dataset to CSV")
    g.add_argument("task", choices=experiment.TASKS)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="CSV path")

    r = sub.add_parser("run", help="run one experiment and write its artifacts")
    _add_common(r)
    r.add_argument("--dataset", choices=experiment.TASKS)
    r.add_argument("--method", choices=experiment.METHODS)
    r.add_argument("--data-seed", type=int)
    r.add_argument("--restarts", type=int)
    r.add_argument("--selection", choices=experiment.SELECTION)
    r.add_argument("--time-limit", type=float, help="seconds before chains are truncated")
    r.add_argument("--workers", type=int, help="processes for restarts and ensemble members")

    rep = sub.add_parser("report", help="aggregate metrics.txt files into a table")
    rep.add_argument("runs", nargs="+", help="run directories or metrics.txt files")
    rep.add_argument("--out", required=True, help="CSV path (a .txt table is written beside it)")

    pl = sub.add_parser("plot", help="render band.csv of a run directory to SVG")
    pl.add_argument("run_dir")
    pl.add_argument("--out", help="SVG path (default <run_dir>/band.svg)")

    rp = sub.add_parser("replay", help="re-run a manifest and compare outputs byte for byte")
    rp.add_argument("manifest")
    rp.add_argument("--out", required=True)

    sub.add_parser("presets", help="list named presets")
    return parser


def _cmd_gen_data(args) -> int:
    ds = datasets.generate(args.task, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    datasets.save(ds, args.out)
    print(f"wrote {args.out} ({ds.counts()})")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = experiment.load_config(
        args.config, args.preset, seed=args.seed, out_dir=args.out, dataset=args.dataset,
        method=args.method, data_seed=args.data_seed, n_restarts=args.restarts,
        selection=args.selection, time_limit=args.time_limit, workers=args.workers)
    art = experiment.run_experiment(cfg)
    print(art.metrics.to_record(), end="")
    if cfg.out_dir:
        print(f"artifacts in {cfg.out_dir}")
    return EXIT_OK


def _cmd_report(args) -> int:
    reports = []
    for item in args.runs:
        p = Path(item)
        if p.is_dir():
            p = p / "metrics.txt"
        reports.append(metrics.MetricsReport.from_record(p.read_text()))
    experiment.emit_report(reports, args.out)
    print(Path(f"{args.out}.txt").read_text(), end="")
    return EXIT_OK


def _cmd_plot(args) -> int:
    run = Path(args.run_dir)
    x, band = plotting.read_band_csv(run / "band.csv")
    data = datasets.load(run / "data.csv")
    tx, ty = data.train
    out = args.out or run / "band.svg"
    plotting.emit_svg_plot(band, x, tx, ty, out, title=run.name)
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_replay(args) -> int:
    _, same = experiment.replay(args.manifest, args.out)
    for name, ok in same.items():
        print(f"{'identical' if ok else 'DIFFERS'}  {name}")
    return EXIT_OK if all(same.values()) else EXIT_RUN_FAILURE


def _cmd_presets(args) -> int:
    for name, p in experiment.presets().items():
        if "method" in p:
            print(name, " ".join(f"{k}={v}" for k, v in p["hyper"].items()))
    return EXIT_OK


COMMANDS = {"gen-data": _cmd_gen_data, "run": _cmd_run, "report": _cmd_report,
            "plot": _cmd_plot, "replay": _cmd_replay, "presets": _cmd_presets}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return COMMANDS[args.verb](args)
    except (experiment.ConfigError, datasets.DatasetParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (experiment.RunFailure, RuntimeError, FloatingPointError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE


if __name__ == "__main__":
    sys.exit(main())

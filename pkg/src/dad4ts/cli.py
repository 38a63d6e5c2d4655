"""Command-line front end: run experiments, aggregate tables, render plots."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from . import pipeline
from .errors import Dad4tsError
from .plots import PLOT_KINDS, render_plot
from .rectflow import SamplerConfig


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dad4ts", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a config file")
    run.add_argument("--config", required=True, help="YAML experiment config")
    run.add_argument("--steps", type=int, default=None, help="override sampler steps")
    run.add_argument("--guidance-w", type=float, default=None, help="override guidance weight")
    run.add_argument("--mode", default=None, help="run a single mode instead of the config list")
    run.add_argument("--force", action="store_true", help="overwrite existing artifacts")

    agg = sub.add_parser("aggregate", help="merge result tables from several runs")
    agg.add_argument("dirs", nargs="+", help="run directories")
    agg.add_argument("--out", required=True, help="output JSON path")
    agg.add_argument("--force", action="store_true", help="overwrite an existing output file")

    plot = sub.add_parser("plot", help="render a diagnostic plot from a run")
    plot.add_argument("--run", required=True, help="run directory")
    plot.add_argument("--kind", required=True, choices=PLOT_KINDS)
    plot.add_argument("--out", required=True, help="output image path")
    plot.add_argument("--cell", default=None, help="cell name (default: first with a dump)")
    plot.add_argument("--force", action="store_true", help="overwrite an existing output file")
    return parser


def cmd_run(args) -> int:
    config_path = Path(args.config)
    if not config_path.exists():
        raise Dad4tsError(f"config file not found: {config_path}")
    raw = yaml.safe_load(config_path.read_text())
    if not isinstance(raw, dict):
        raise Dad4tsError(f"config file {config_path} must hold a mapping")
    out_dir = raw.pop("out_dir", None)
    if out_dir is None:
        raise Dad4tsError("config must set out_dir for the run artifacts")
    if args.mode is not None:
        raw["modes"] = [args.mode]
        raw.pop("mode", None)
    cfg = pipeline.ExperimentConfig.from_dict(raw)
    if args.steps is not None or args.guidance_w is not None:
        sampler = cfg.sampler.to_json()
        if args.steps is not None:
            sampler["steps"] = args.steps
        if args.guidance_w is not None:
            sampler["guidance_weight"] = args.guidance_w
        cfg = pipeline.ExperimentConfig.from_dict({**raw, "sampler": sampler})

    out_path = Path(out_dir)
    if (out_path / "result_table.json").exists() and not args.force:
        raise Dad4tsError(f"artifacts already present in {out_path}; pass --force to overwrite")
    pipeline.run_experiment(cfg, artifacts_dir=out_path)
    print(f"run complete: {out_path / 'result_table.json'}")
    return 0


def cmd_aggregate(args) -> int:
    from .metrics import ResultCell
    from .pipeline import build_result_table

    merged_cells = []
    improvements = {}
    for raw_dir in args.dirs:
        run_dir = Path(raw_dir)
        table_path = run_dir / "result_table.json"
        if not table_path.exists():
            raise Dad4tsError(f"no result table in {run_dir}")
        table = json.loads(table_path.read_text())
        cells = [ResultCell(**c) for c in table["cells"]]
        if not any(c.mode == "baseline" for c in cells):
            raise Dad4tsError(f"{run_dir} holds no baseline rows to compare against")
        cells = sorted(cells, key=lambda c: (c.dataset, c.forecaster, c.horizon, c.mode))
        merged_cells.extend(cells)
        improvements[run_dir.name] = build_result_table(cells)["improvement"]

    merged_cells = sorted(
        merged_cells, key=lambda c: (c.dataset, c.forecaster, c.horizon, c.mode)
    )
    combined = build_result_table(merged_cells)
    combined["per_run_improvement"] = improvements

    out_path = Path(args.out)
    if out_path.exists() and not args.force:
        raise Dad4tsError(f"{out_path} exists; pass --force to overwrite")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(combined, sort_keys=True, indent=2) + "\n")
    print(f"aggregate written: {out_path}")
    return 0


def cmd_plot(args) -> int:
    out_path = Path(args.out)
    if out_path.exists() and not args.force:
        raise Dad4tsError(f"{out_path} exists; pass --force to overwrite")
    written = render_plot(args.run, args.kind, out_path, cell=args.cell)
    print(f"plot written: {written}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {"run": cmd_run, "aggregate": cmd_aggregate, "plot": cmd_plot}
    try:
        return handlers[args.command](args)
    except Dad4tsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

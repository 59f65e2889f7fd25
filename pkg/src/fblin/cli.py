"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or configuration, 2 simulation
divergence, 3 an acceptance check failed (only with ``--check``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .errors import ConditioningError, ConfigError, DivergenceError, ModelFormatError
from .excitation import ExcitationDesign, MultisineSpec, design, export, realisations
from .experiments import SCENARIOS, ExperimentConfig, _Run, build_plant, controller_model, default_config, run_scenario
from .plantsim import run_open_loop_batch
from .records import SignalRecord, read_csv, write_csv

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("fblin")


def _config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        if args.scenario and args.scenario != cfg.scenario:
            raise ConfigError(f"--scenario {args.scenario} contradicts config scenario {cfg.scenario}")
    elif args.scenario:
        cfg = default_config(args.scenario)
    else:
        raise ConfigError("give --config or --scenario")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.full_scale:
        cfg = cfg.scaled_up()
    cfg.validate()
    return cfg


def _load_design(path: str | Path) -> ExcitationDesign:
    """Rebuild an excitation design from the metadata JSON written by ``excite``."""
    try:
        meta = json.loads(Path(path).read_text())
        spec = MultisineSpec(**meta["spec"])
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read design metadata {path}: {exc}") from exc
    return design(spec, phase_seed=meta.get("phase_seed", spec.seed))


def cmd_excite(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    for rec in realisations(cfg.multisine(), cfg.realisations, cfg.periods):
        for p in export(rec, out / f"excitation_r{rec.realisation}"):
            print(p)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    run = _Run(cfg, Path(args.out))
    plant = build_plant(cfg.plant, controller_model(cfg, cfg.variant), cfg.control.ts_in)
    records, noise = run_open_loop_batch(plant, realisations(cfg.multisine(), cfg.realisations, cfg.periods),
                                         run.noise())
    for rec in records:
        print(run.write(f"open_r{rec.realisation}.csv", rec.channels()))
    return EXIT_OK


def cmd_linearise(args) -> int:
    cfg = _config(args)
    run = _Run(cfg, Path(args.out))
    excitation = realisations(cfg.multisine(), cfg.realisations, cfg.periods)
    plant = build_plant(cfg.plant, controller_model(cfg, cfg.variant), cfg.control.ts_in)
    _, noise = run_open_loop_batch(plant, excitation, run.noise())
    records = run.closed_loop(cfg.variant, excitation, noise, "closed")
    errs = analysis.error_metrics(records, discard=cfg.discard)
    print(json.dumps(errs.to_dict(), indent=2))
    for p in run.artifacts:
        print(p)
    return EXIT_OK


def cmd_analyse(args) -> int:
    records = []
    for i, path in enumerate(args.records):
        cols = read_csv(path)
        meta = args.design[i] if len(args.design) > 1 else args.design[0]
        d = _load_design(meta)
        try:
            u, y = cols[args.input], cols[args.output]
        except KeyError as exc:
            raise ConfigError(f"{path} lacks column {exc}") from exc
        if args.decimate > 1:
            u, y = u[:: args.decimate], y[:: args.decimate]
        records.append(SignalRecord(t=np.arange(u.size) / d.spec.fs, u=u, y=y, design=d, realisation=i))
    rep = analysis.distortions(analysis.spectra(records, args.discard))
    for p in rep.write(Path(args.out) / "distortions"):
        print(p)
    print(json.dumps(rep.summary(), indent=2))
    return EXIT_OK


def cmd_compare(args) -> int:
    before = analysis.DistortionReport.read(args.before)
    after = analysis.DistortionReport.read(args.after)
    delta = analysis.compare_runs(before, after)
    text = json.dumps(delta, indent=2)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.json").write_text(text + "\n")
        cols = {"f": before.freq, "delta_db": analysis.db(after.output) - analysis.db(before.output),
                "class": before.lines.astype(float)}
        write_csv(out / "compare.csv", cols)
    print(text)
    return EXIT_OK


def cmd_scenario(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else Path("runs") / cfg.scenario
    result = run_scenario(cfg, out)
    print(json.dumps({"scenario": cfg.scenario, "passed": result.passed, "metrics": result.metrics}, indent=2))
    if args.check and not result.passed:
        for name, c in result.checks.items():
            if not c["passed"]:
                print(f"check failed: {name} = {c['value']} not in [{c['low']}, {c['high']}]", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def _common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--scenario", choices=SCENARIOS, help="named scenario with built-in defaults")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--full-scale", action="store_true", help="use the full realisation/period counts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fblin", description="Feedback linearisation by MPC: simulation and analysis")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("excite", help="design and export multisine realisations")
    _common(p)
    p.set_defaults(func=cmd_excite)

    p = sub.add_parser("simulate", help="open-loop plant runs")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("linearise", help="closed-loop runs with UKF and MPC")
    _common(p)
    p.set_defaults(func=cmd_linearise)

    p = sub.add_parser("analyse", help="distortion analysis of CSV records")
    p.add_argument("records", nargs="+", help="CSV records, one per realisation")
    p.add_argument("--design", nargs="+", required=True, help="design metadata JSON (one, or one per record)")
    p.add_argument("--input", default="u", help="input column (default u)")
    p.add_argument("--output", default="y", help="output column (default y)")
    p.add_argument("--decimate", type=int, default=1, help="keep every k-th sample (closed-loop logs)")
    p.add_argument("--discard", type=int, default=1, help="transient periods to drop")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyse)

    p = sub.add_parser("scenario", help="named end-to-end run")
    _common(p, out_required=False)
    p.add_argument("--check", action="store_true", help="exit 3 when an embedded threshold fails")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("compare", help="compare two distortion reports (CSV)")
    p.add_argument("before")
    p.add_argument("after")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ModelFormatError, ConditioningError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

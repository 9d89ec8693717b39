"""Command-line front end: ``cais-lab {run,sweep,report,selftest}``."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from .config import SweepGrid, parse_config, parse_sweep
from .errors import ConfigError, ContractError, NumericalInstabilityError
from .harness import (
    aggregate,
    cell_config,
    condition_key,
    run_experiment,
    run_path,
    sweep,
    write_manifest,
    write_run_csv,
    write_summary_csv,
)
from .report import DEFAULT_SMOOTHING, report
from .selftest import selftest

OUT_ENV = "CAIS_LAB_OUT"
DEFAULT_OUT = "cais_lab_out"

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

# flag name -> dotted config path
FLAG_PATHS = {
    "gamma": "agent.gamma",
    "temperature": "agent.temperature",
    "move_bias": "agent.move_bias",
    "lr": "agent.lr",
    "rtl": "agent.rtl",
    "surprise_weight": "agent.reward.surprise_weight",
    "base_scale": "agent.reward.base_scale",
    "noise_force": "env.noise_force_magnitude",
    "attached_limb": "env.attached_limb",
    "forced_action": "forced_action",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config or manifest file (defaults when omitted)")
    p.add_argument("--out", type=Path, help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--gamma", type=float, help="discount factor")
    p.add_argument("--temperature", type=float, help="Boltzmann temperature")
    p.add_argument("--move-bias", dest="move_bias", type=float, help="logit offset of MOVE")
    p.add_argument("--lr", type=float, help="value-net learning rate")
    p.add_argument("--rtl", choices=["step", "path"], help="RTL statistic")
    p.add_argument("--surprise-weight", dest="surprise_weight", type=float)
    p.add_argument("--base-scale", dest="base_scale", type=float, help="override the calibrated reward scale")
    p.add_argument("--noise-force", dest="noise_force", type=float, help="noise force magnitude")
    p.add_argument("--attached-limb", dest="attached_limb", choices=["LeftLeg", "RightLeg", "LeftArm", "RightArm"])
    p.add_argument("--forced-action", dest="forced_action", choices=["no_torque", "move"], help="debug: constant policy")
    p.add_argument(
        "--set", dest="sets", action="append", default=[], metavar="KEY=JSON",
        help="override any config value by dotted path, e.g. --set model.kappa=0.05",
    )


def _overrides(args) -> dict:
    out = {}
    for flag, path in FLAG_PATHS.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[path] = value
    for item in args.sets:
        if "=" not in item:
            raise ConfigError(item, "expected KEY=VALUE")
        key, raw = item.split("=", 1)
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out


def _outdir(args, run) -> Path:
    if args.out is not None:
        return args.out
    if run.out is not None:
        return Path(run.out)
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


def _parse_list(text: str | None) -> list[str] | None:
    if text is None:
        return None
    return [t.strip().lower() for t in text.split(",") if t.strip()]


def _parse_seeds(text: str | None) -> list[int] | None:
    """``10`` means seeds 0..9; ``3,5,8`` lists them explicitly."""
    if text is None:
        return None
    try:
        if "," in text:
            return [int(t) for t in text.split(",") if t.strip()]
        n = int(text)
    except ValueError:
        raise ConfigError("--seeds", f"expected a count or a comma-separated list, got {text!r}") from None
    if n < 1:
        raise ConfigError("--seeds", f"seed count must be >= 1, got {n}")
    return list(range(n))


def cmd_run(args) -> int:
    overrides = _overrides(args)
    if args.condition:
        overrides["env.condition"] = args.condition
    run = parse_config(args.config, overrides)
    if args.reward:
        run = cell_config(run, run.env.condition, args.reward)
    seeds = [args.seed] if args.seed is not None else list(run.seeds)
    run = replace(run, seeds=seeds)
    outdir = _outdir(args, run)
    summaries = []
    for seed in seeds:
        t0 = time.perf_counter()
        try:
            log, summary = run_experiment(run, seed)
        except NumericalInstabilityError as exc:
            print(f"seed {seed}: numerical instability at step {exc.step}: {exc}", file=sys.stderr)
            return EXIT_FAILED
        path = run_path(outdir, run, seed)
        write_run_csv(log, path)
        summaries.append(summary)
        print(
            f"seed {seed}: {time.perf_counter() - t0:.1f}s  separation={summary['separation']:+.3f}  "
            f"burst={summary['burst_index']:+.3f}  -> {path}"
        )
    write_manifest(run, outdir / "manifest.json", seeds=seeds)
    write_summary_csv({(condition_key(run.env.condition), run.agent.reward.name): aggregate(summaries)}, outdir / "summary.csv")
    return EXIT_OK


def cmd_sweep(args) -> int:
    overrides = _overrides(args)
    run, grid = parse_sweep(args.config, overrides)
    grid = SweepGrid(
        _parse_list(args.conditions) or grid.conditions,
        _parse_list(args.rewards) or grid.rewards,
        _parse_seeds(args.seeds) or grid.seeds,
    )
    run = replace(run, seeds=grid.seeds)
    outdir = _outdir(args, run)
    jobs = args.jobs or os.cpu_count() or 1
    print(f"sweep: {grid.n_cells} runs ({len(grid.conditions)} conditions x {len(grid.rewards)} rewards x "
          f"{len(grid.seeds)} seeds) on {jobs} worker(s) -> {outdir}")
    t0 = time.perf_counter()
    result = sweep(run, grid.conditions, grid.rewards, grid.seeds, jobs=jobs, outdir=outdir)
    for (cond, reward), stats in sorted(result.stats().items()):
        sep, burst = stats["separation"], stats["burst_index"]
        print(f"  {cond:5s} {reward:14s} separation {sep['mean']:+.3f} +- {sep['std']:.3f}   "
              f"burst {burst['mean']:+.3f} +- {burst['std']:.3f}")
    print(f"done in {time.perf_counter() - t0:.0f}s")
    if result.failures:
        for cond, reward, seed, msg in result.failures:
            print(f"FAILED {cond}/{reward}/seed {seed}: {msg}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_report(args) -> int:
    indir = args.indir or Path(os.environ.get(OUT_ENV, DEFAULT_OUT))
    try:
        result = report(indir, smoothing=args.window)
    except ContractError as exc:
        print(f"report: {exc}", file=sys.stderr)
        return EXIT_FAILED
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"summary: {result.summary_path}")
    for p in result.plots:
        print(f"plot: {p}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    t0 = time.perf_counter()
    results = selftest()
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if failed == 0 else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cais-lab", description="Contingency learning with CAIS, MTL and RTL rewards.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one configuration for one or more seeds")
    _add_common(p)
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--condition", choices=["free", "noisy"])
    p.add_argument("--reward", help="reward name such as cais or mtl+surprise")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run the condition x reward x seed grid in parallel")
    _add_common(p)
    p.add_argument("--conditions", help="comma-separated, e.g. free,noisy")
    p.add_argument("--rewards", help="comma-separated, e.g. mtl,rtl,cais,cais+surprise")
    p.add_argument("--seeds", help="seed count (0..N-1) or comma-separated seed list")
    p.add_argument("--jobs", type=int, help="worker processes (default: available CPUs)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summary CSV and SVG plots for an output directory")
    p.add_argument("--in", dest="indir", type=Path, help=f"directory with run CSVs (default: ${OUT_ENV})")
    p.add_argument("--window", type=int, default=DEFAULT_SMOOTHING, help="moving-average window in steps")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="run the numerical oracle suite")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Subcommands::

    vstopo run --config cfg.json --out outdir
    vstopo benchmark <name> --case <letter> --out outdir
    vstopo sweep <name> --cases a,b,c (or a..h) [--out outdir] [--jobs N]
    vstopo validate --config cfg.json

Exit status is 0 on success, 2 on bad flags, 1 on any other failure.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import sys
from pathlib import Path

from .pipeline import (ConfigError, PipelineError, benchmark, benchmark_cases,
                       load_config, run_dsco, write_convergence_csv)

__all__ = ["main", "cli_main"]


def _parse_cases(spec: str, name: str) -> list:
    available = benchmark_cases(name)
    if ".." in spec:
        lo, hi = spec.split("..", 1)
        if len(lo) != 1 or len(hi) != 1 or lo > hi:
            raise ConfigError(f"case range {spec!r} must look like 'a..h'")
        cases = [chr(c) for c in range(ord(lo), ord(hi) + 1)]
    else:
        cases = [c.strip() for c in spec.split(",") if c.strip()]
    if not cases:
        raise ConfigError(f"no cases given in {spec!r}")
    for c in cases:
        if c not in available:
            raise ConfigError(f"unknown case {c!r} for {name!r}; available: {','.join(available)}")
    return cases


def _run_sweep_case(args):
    name, case, out_dir = args
    result = run_dsco(benchmark(name, case).config,
                      None if out_dir is None else Path(out_dir) / f"{name}_{case}")
    return case, result.summary.compliance, result.summary.iterations


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vstopo",
                                     description="variable-stiffness composite topology optimization")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a pipeline from a JSON config")
    p_run.add_argument("--config", required=True, help="path to the JSON problem config")
    p_run.add_argument("--out", required=True, help="artifact output directory")

    p_bench = sub.add_parser("benchmark", help="run one registered benchmark case")
    p_bench.add_argument("name", help="mbb | lshape | cantilever | cantilever_multi")
    p_bench.add_argument("--case", required=True, help="case letter, e.g. h")
    p_bench.add_argument("--out", required=True, help="artifact output directory")

    p_sweep = sub.add_parser("sweep", help="run several cases and tabulate the results")
    p_sweep.add_argument("name", help="benchmark name")
    p_sweep.add_argument("--cases", required=True, help="comma list (a,b,c) or range (a..h)")
    p_sweep.add_argument("--out", default=None, help="directory for per-case artifacts and the sweep CSV")
    p_sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p_val = sub.add_parser("validate", help="validate a JSON config and echo the normalized form")
    p_val.add_argument("--config", required=True, help="path to the JSON problem config")
    return parser


def cli_main(argv=None) -> int:
    """Entry point used by tests; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        if args.command == "validate":
            config = load_config(Path(args.config))
            print(json.dumps(config.as_dict(), indent=2, sort_keys=True))
            return 0
        if args.command == "run":
            result = run_dsco(load_config(Path(args.config)), args.out)
            print(f"compliance {result.summary.compliance:.6g} "
                  f"in {result.summary.iterations} iterations -> {args.out}")
            return 0
        if args.command == "benchmark":
            case = benchmark(args.name, args.case)
            result = run_dsco(case.config, args.out)
            print(f"{args.name} case({args.case}): compliance {result.summary.compliance:.6g} "
                  f"in {result.summary.iterations} iterations -> {args.out}")
            return 0
        if args.command == "sweep":
            cases = _parse_cases(args.cases, args.name)
            jobs = [(args.name, c, args.out) for c in cases]
            if args.jobs > 1:
                with multiprocessing.Pool(args.jobs) as pool:
                    results = pool.map(_run_sweep_case, jobs)
            else:
                results = [_run_sweep_case(j) for j in jobs]
            lines = ["case,compliance,iterations"]
            for case, compliance, iterations in results:
                lines.append(f"{case},{compliance:.12g},{iterations}")
                print(f"{args.name} case({case}): compliance {compliance:.6g}, "
                      f"{iterations} iterations")
            text = "\n".join(lines) + "\n"
            if args.out is not None:
                out = Path(args.out)
                out.mkdir(parents=True, exist_ok=True)
                (out / f"sweep_{args.name}.csv").write_text(text, encoding="utf-8")
            return 0
    except (ConfigError, PipelineError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(cli_main())

"""Command line entry points.

    qtorhc synth   --config pendulum_qto
    qtorhc run     --config pendulum_qto --out runs/pendulum
    qtorhc run     --config a.json --config b.json --out runs
    qtorhc compare runs/pendulum runs/pendulum_lq --out runs/cmp
    qtorhc audit   runs/pendulum

`run` writes trace.csv, summary.json, meta.json and the rendered figures
into the output directory; repeating --config runs a batch concurrently.
Exit codes: 0 on clean convergence, 2 when a run stops without converging,
1 on hard errors (bad config, escalation limit, missing files).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path

import numpy as np

from .config import (ConfigError, ScenarioConfig, bundled_scenario_names,
                     config_to_dict, find_config, load_config,
                     resolve_scenario)
from .plotting import save_comparison_figure, save_run_figures
from .report import (META_NAME, SUMMARY_NAME, TRACE_NAME, audit_run,
                     compare_runs, read_trace, summarize_run, write_meta,
                     write_summary, write_trace)
from .rhc import run_closed_loop

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2


def run_scenario(config: ScenarioConfig, out_dir) -> tuple:
    """Run one closed-loop scenario and write its report under out_dir.

    Returns (exit_code, summary). Exit 0 means the loop reached its
    convergence threshold, or the planned handoff point in time-optimal
    mode; 2 means the step limit expired first.
    """
    setup = resolve_scenario(config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    history = run_closed_loop(
        np.array(config.x0, dtype=float), setup.template, setup.rhc,
        mode=config.mode, epsilon0=config.eps0,
        convergence_eps=config.convergence_eps, restarts=config.restarts,
        seed=config.seed, t0_range=config.t0_range,
        warm_max_iter=config.warm_max_iter)
    summary = summarize_run(history, config, setup.terminal)
    write_trace(history, out_dir / TRACE_NAME)
    write_summary(summary, out_dir / SUMMARY_NAME)
    write_meta(config_to_dict(config),
               {"alpha": float(setup.terminal.alpha), "h": config.h_resolved},
               out_dir / META_NAME)
    save_run_figures(history, out_dir, f"{config.plant} ({history.mode})")
    clean = history.converged or history.stop_reason == "handoff point reached"
    return (EXIT_OK if clean else EXIT_NOT_CONVERGED), summary


def _load_with_overrides(name_or_path, mode, seed) -> ScenarioConfig:
    config = load_config(find_config(name_or_path))
    updates = {}
    if mode is not None:
        updates["mode"] = mode.replace("-", "_")
    if seed is not None:
        updates["seed"] = seed
    return dataclasses.replace(config, **updates) if updates else config


def _batch_job(config_path: str, out_dir: str, mode, seed) -> tuple:
    try:
        config = _load_with_overrides(config_path, mode, seed)
        code, summary = run_scenario(config, out_dir)
        return code, _run_line(out_dir, code, summary)
    except Exception as err:
        return EXIT_ERROR, f"{out_dir}: error: {err}"


def _run_line(out_dir, code, summary) -> str:
    outcome = "converged" if code == EXIT_OK else summary["stop_reason"]
    settle = summary["settling_time"]
    settle_txt = "-" if settle is None else f"{settle:.3f}"
    return (f"{out_dir}: {summary['plant']} {summary['mode']} {outcome}, "
            f"steps={summary['steps']}, settling={settle_txt}, "
            f"violations={summary['invariant_violations']}")


def _cmd_synth(args) -> int:
    config = _load_with_overrides(args.config, None, None)
    setup = resolve_scenario(config)
    print(json.dumps({"K": setup.terminal.K.tolist(),
                      "H": setup.terminal.H.tolist(),
                      "alpha": float(setup.terminal.alpha)},
                     indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_run(args) -> int:
    paths = [find_config(c) for c in args.config]
    if len(paths) == 1:
        config = _load_with_overrides(paths[0], args.mode, args.seed)
        out_dir = args.out or config.output_dir or f"runs/{paths[0].stem}"
        code, summary = run_scenario(config, out_dir)
        print(_run_line(out_dir, code, summary))
        return code

    stems = [p.stem for p in paths]
    if len(set(stems)) != len(stems):
        raise ConfigError(["duplicate scenario names in batch: "
                           + ", ".join(sorted(stems))])
    base = Path(args.out or "runs")
    codes = []
    with ProcessPoolExecutor(max_workers=min(len(paths),
                                             os.cpu_count() or 2)) as pool:
        futures = [pool.submit(_batch_job, str(p), str(base / p.stem),
                               args.mode, args.seed) for p in paths]
        for future in as_completed(futures):
            code, line = future.result()
            codes.append(code)
            print(line)
    if EXIT_ERROR in codes:
        return EXIT_ERROR
    return EXIT_NOT_CONVERGED if EXIT_NOT_CONVERGED in codes else EXIT_OK


def _cmd_compare(args) -> int:
    report = compare_runs(args.runs, args.out)
    traces = {}
    for entry in report["runs"]:
        _steps, dense = read_trace(Path(entry["dir"]) / TRACE_NAME)
        traces[entry["label"]] = (dense["times"],
                                  np.linalg.norm(dense["states"], axis=1))
    save_comparison_figure(report, traces, args.out)
    print(f"ranking (fastest settling first): {', '.join(report['ranking'])}")
    print(f"wrote comparison.json, comparison.csv, comparison.png to {args.out}")
    return EXIT_OK


def _cmd_audit(args) -> int:
    report = audit_run(args.run)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK if report["ok"] else EXIT_NOT_CONVERGED


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qtorhc",
        description="Minimum-time receding-horizon control with a smooth "
                    "handoff to linear feedback.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log per-step solver progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="print the synthesized terminal "
                                     "feedback gain and certificate")
    p.add_argument("--config", required=True, metavar="NAME_OR_PATH",
                   help="scenario file, or a bundled name: "
                        + ", ".join(bundled_scenario_names()))
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("run", help="run a closed-loop scenario and write "
                                   "its trace, summaries, and figures")
    p.add_argument("--config", required=True, action="append",
                   metavar="NAME_OR_PATH",
                   help="scenario to run; repeat for a concurrent batch")
    p.add_argument("--out", help="output directory (batch: parent directory)")
    p.add_argument("--mode", choices=["qto", "time-optimal", "time_optimal",
                                      "lq"],
                   help="override the scenario's controller mode")
    p.add_argument("--seed", type=int, help="override the scenario's seed")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("compare", help="rank finished runs of one plant "
                                       "and merge their traces")
    p.add_argument("runs", nargs="+", help="run directories to compare")
    p.add_argument("--out", required=True, help="comparison output directory")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("audit", help="re-verify the recorded invariants of "
                                     "a finished run")
    p.add_argument("run", help="run directory or trace.csv path")
    p.set_defaults(func=_cmd_audit)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.DEBUG, format="%(message)s")
        logging.getLogger("matplotlib").setLevel(logging.WARNING)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

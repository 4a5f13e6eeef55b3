"""Run artifacts: delimited trace, JSON summaries, trace audit, run comparison.

trace.csv carries two row kinds: one `step` row per controller step holding
the solver-side quantities (value, horizon, blend, penalty, cost breakdown),
and `dense` rows sampling the plant trajectory between steps. All floats are
written with shortest round-trip formatting, so a fixed seed reproduces the
file byte for byte.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Optional

import numpy as np

from .rhc import RunHistory, settling_time

TRACE_NAME = "trace.csv"
SUMMARY_NAME = "summary.json"
META_NAME = "meta.json"

IDENTITY_RTOL = 1e-6   # step rows must satisfy V = T + eps*(head+tail) + rho*q


def _fmt(value) -> str:
    return repr(float(value))


def control_effort(times: np.ndarray, controls: np.ndarray,
                   R: np.ndarray) -> float:
    """Integral of u'Ru along the dense trace (trapezoid rule)."""
    quad = np.einsum("ij,jk,ik->i", controls, R, controls)
    return float(np.trapezoid(quad, times))


def write_trace(history: RunHistory, path) -> None:
    n = history.states.shape[1]
    m = history.controls.shape[1]
    header = (["kind", "t"] + [f"x{i + 1}" for i in range(n)]
              + [f"u{i + 1}" for i in range(m)]
              + ["V", "T_bar", "epsilon", "rho", "in_B",
                 "integral_L_head", "integral_L_tail", "terminal_q"])
    blank = [""] * 8
    records = list(history.records)
    next_rec = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, t in enumerate(history.times):
            # step boundaries carry integrator float dust; match by order
            if next_rec < len(records) and records[next_rec].t <= t + 1e-9:
                rec = records[next_rec]
                next_rec += 1
                writer.writerow(
                    ["step", _fmt(rec.t)] + [_fmt(v) for v in rec.x]
                    + [_fmt(v) for v in rec.applied.values[0]]
                    + [_fmt(rec.V), _fmt(rec.T_bar), _fmt(rec.epsilon),
                       _fmt(rec.rho), str(int(rec.in_B)),
                       _fmt(rec.integral_L_head), _fmt(rec.integral_L_tail),
                       _fmt(rec.terminal_q)])
            writer.writerow(
                ["dense", _fmt(t)] + [_fmt(v) for v in history.states[i]]
                + [_fmt(v) for v in history.controls[i]] + blank)


def read_trace(path):
    """Parse trace.csv back into (step records as dicts, dense arrays)."""
    steps = []
    dense_rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        x_cols = [c for c in reader.fieldnames if c.startswith("x")]
        u_cols = [c for c in reader.fieldnames if c.startswith("u")]
        for row in reader:
            if row["kind"] == "step":
                steps.append({
                    "t": float(row["t"]),
                    "x": [float(row[c]) for c in x_cols],
                    "u": [float(row[c]) for c in u_cols],
                    "V": float(row["V"]),
                    "T_bar": float(row["T_bar"]),
                    "epsilon": float(row["epsilon"]),
                    "rho": float(row["rho"]),
                    "in_B": bool(int(row["in_B"])),
                    "integral_L_head": float(row["integral_L_head"]),
                    "integral_L_tail": float(row["integral_L_tail"]),
                    "terminal_q": float(row["terminal_q"]),
                })
            else:
                dense_rows.append([float(row["t"])]
                                  + [float(row[c]) for c in x_cols]
                                  + [float(row[c]) for c in u_cols])
    dense = np.array(dense_rows) if dense_rows else np.zeros((0, 1))
    n = len(x_cols)
    return steps, {
        "times": dense[:, 0] if dense.size else np.zeros(0),
        "states": dense[:, 1:1 + n] if dense.size else np.zeros((0, n)),
        "controls": dense[:, 1 + n:] if dense.size else np.zeros((0, len(u_cols))),
    }


def summarize_run(history: RunHistory, config, terminal) -> dict:
    settle = settling_time(history.times, history.states,
                           config.settle_threshold)
    records = history.records
    R = np.array(config.R, dtype=float)
    return {
        "plant": config.plant,
        "mode": history.mode,
        "seed": config.seed,
        "converged": history.converged,
        "stop_reason": history.stop_reason,
        "steps": len(records),
        "simulated_time": float(history.times[-1]),
        "settling_time": settle,
        "settle_threshold": config.settle_threshold,
        "final_state": [float(v) for v in history.final_state],
        "final_state_norm": float(np.linalg.norm(history.final_state)),
        "final_epsilon": records[-1].epsilon if records else None,
        "final_rho": records[-1].rho if records else None,
        "invariant_violations": history.violations,
        "control_effort": control_effort(history.times, history.controls, R),
        "K": [[float(v) for v in row] for row in terminal.K],
        "H": [[float(v) for v in row] for row in terminal.H],
        "alpha": float(terminal.alpha),
        "k": float(terminal.k),
    }


def write_summary(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def write_meta(config_dict: dict, resolved: dict, path) -> None:
    Path(path).write_text(json.dumps({"config": config_dict,
                                      "resolved": resolved},
                                     indent=2, sort_keys=True) + "\n")


def audit_run(run_dir) -> dict:
    """Re-verify the recorded invariants of a finished run from its files.

    Checks, per step row: the value identity within IDENTITY_RTOL, blend and
    penalty monotonicity and ranges, and the certified endpoint level
    terminal_q / k <= alpha. Returns a report dict with a per-check tally.
    """
    run_dir = Path(run_dir)
    trace_path = run_dir / TRACE_NAME if run_dir.is_dir() else run_dir
    steps, _dense = read_trace(trace_path)
    summary = None
    summary_path = trace_path.parent / SUMMARY_NAME
    if summary_path.exists():
        summary = json.loads(summary_path.read_text())

    failures = {"identity": 0, "epsilon_range": 0, "rho_range": 0,
                "epsilon_monotone": 0, "rho_monotone": 0, "endpoint_level": 0}
    for i, row in enumerate(steps):
        recon = (row["T_bar"]
                 + row["epsilon"] * (row["integral_L_head"] + row["integral_L_tail"])
                 + row["rho"] * row["terminal_q"])
        if not math.isclose(row["V"], recon, rel_tol=IDENTITY_RTOL,
                            abs_tol=IDENTITY_RTOL):
            failures["identity"] += 1
        if not 0.0 <= row["epsilon"] <= 1.0:
            failures["epsilon_range"] += 1
        if row["rho"] < 1.0:
            failures["rho_range"] += 1
        if i > 0:
            if row["epsilon"] < steps[i - 1]["epsilon"]:
                failures["epsilon_monotone"] += 1
            if row["rho"] < steps[i - 1]["rho"]:
                failures["rho_monotone"] += 1
        if summary is not None:
            level = row["terminal_q"] / summary["k"]
            if level > summary["alpha"] * (1.0 + 1e-9):
                failures["endpoint_level"] += 1

    total = sum(failures.values())
    return {
        "trace": str(trace_path),
        "steps_checked": len(steps),
        "failures": failures,
        "total_failures": total,
        "ok": total == 0,
        "level_check": summary is not None,
    }


def _load_run(run_dir: Path) -> dict:
    summary = json.loads((run_dir / SUMMARY_NAME).read_text())
    meta = json.loads((run_dir / META_NAME).read_text())
    steps, dense = read_trace(run_dir / TRACE_NAME)
    return {"dir": run_dir, "summary": summary, "meta": meta,
            "steps": steps, "dense": dense}


def compare_runs(run_dirs, out_dir) -> dict:
    """Side-by-side report of finished runs on the same plant and start.

    Ranks runs by settling time, tabulates control effort, and merges the
    per-run traces into one long-format CSV for plotting. Writes
    comparison.json and comparison.csv under out_dir.
    """
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two run directories")
    runs = [_load_run(Path(d)) for d in run_dirs]
    base = runs[0]["meta"]["config"]
    msgs = []
    for run in runs[1:]:
        cfg = run["meta"]["config"]
        if cfg["plant"] != base["plant"]:
            msgs.append(f"{run['dir']}: plant {cfg['plant']} differs from {base['plant']}")
        if list(cfg["x0"]) != list(base["x0"]):
            msgs.append(f"{run['dir']}: x0 {cfg['x0']} differs from {base['x0']}")
    if msgs:
        raise ValueError("; ".join(msgs))

    entries = []
    for run in runs:
        s = run["summary"]
        entries.append({
            "dir": str(run["dir"]),
            "label": f"{s['mode']}:{Path(run['dir']).name}",
            "mode": s["mode"],
            "converged": s["converged"],
            "settling_time": s["settling_time"],
            "control_effort": s["control_effort"],
            "final_epsilon": s["final_epsilon"],
            "final_rho": s["final_rho"],
            "invariant_violations": s["invariant_violations"],
            "value_trace": {"t": [row["t"] for row in run["steps"]],
                            "V": [row["V"] for row in run["steps"]]},
        })
    order = sorted(range(len(entries)),
                   key=lambda i: (entries[i]["settling_time"] is None,
                                  entries[i]["settling_time"]))
    best = entries[order[0]]
    for entry in entries:
        if entry["settling_time"] is None or best["settling_time"] is None:
            entry["settling_time_vs_best"] = None
        else:
            entry["settling_time_vs_best"] = entry["settling_time"] - best["settling_time"]
    report = {
        "plant": base["plant"],
        "x0": list(base["x0"]),
        "ranking": [entries[i]["label"] for i in order],
        "runs": entries,
    }

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "comparison.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "kind", "t", "state_norm", "V"])
        for run, entry in zip(runs, entries):
            dense = run["dense"]
            norms = np.linalg.norm(dense["states"], axis=1)
            for t, nrm in zip(dense["times"], norms):
                writer.writerow([entry["label"], "dense", _fmt(t), _fmt(nrm), ""])
            for row in run["steps"]:
                writer.writerow([entry["label"], "step", _fmt(row["t"]),
                                 _fmt(np.linalg.norm(row["x"])), _fmt(row["V"])])
    return report

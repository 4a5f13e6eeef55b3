"""Matplotlib figures for finished runs, rendered to files.

Uses the Agg backend so figures render headlessly alongside the delimited
output. Each run gets a state plot, a control plot, and a diagnostics sheet;
comparisons get one overlay figure.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .rhc import RunHistory


def save_run_figures(history: RunHistory, out_dir, title: str) -> list:
    """Render states.png, control.png, diagnostics.png under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    t = history.times
    n = history.states.shape[1]
    m = history.controls.shape[1]

    fig, ax = plt.subplots(figsize=(7, 4))
    for i in range(n):
        ax.plot(t, history.states[:, i], label=f"x{i + 1}")
    ax.set_xlabel("t")
    ax.set_ylabel("state")
    ax.set_title(f"{title}: states")
    ax.legend()
    ax.grid(True, alpha=0.3)
    path = out_dir / "states.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(7, 3))
    for i in range(m):
        ax.step(t, history.controls[:, i], where="post", label=f"u{i + 1}")
    ax.set_xlabel("t")
    ax.set_ylabel("control")
    ax.set_title(f"{title}: control")
    if m > 1:
        ax.legend()
    ax.grid(True, alpha=0.3)
    path = out_dir / "control.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    paths.append(path)

    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    norms = np.linalg.norm(history.states, axis=1)
    ax = axes[0, 0]
    ax.semilogy(t, np.maximum(norms, 1e-16))
    ax.set_xlabel("t")
    ax.set_ylabel("|x|")
    ax.grid(True, alpha=0.3)
    if history.records:
        ts = [r.t for r in history.records]
        ax = axes[0, 1]
        ax.plot(ts, [r.V for r in history.records], label="V")
        ax.plot(ts, [r.T_bar for r in history.records], label="horizon")
        ax.set_xlabel("t")
        ax.legend()
        ax.grid(True, alpha=0.3)
        ax = axes[1, 0]
        ax.plot(ts, [r.epsilon for r in history.records])
        ax.set_xlabel("t")
        ax.set_ylabel("blend weight")
        ax.set_ylim(-0.05, 1.05)
        ax.grid(True, alpha=0.3)
        ax = axes[1, 1]
        ax.semilogy(ts, [r.rho for r in history.records])
        ax.set_xlabel("t")
        ax.set_ylabel("endpoint penalty")
        ax.grid(True, alpha=0.3)
    else:
        for ax in (axes[0, 1], axes[1, 0], axes[1, 1]):
            ax.set_axis_off()
    fig.suptitle(f"{title}: diagnostics")
    fig.tight_layout()
    path = out_dir / "diagnostics.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    paths.append(path)
    return paths


def save_comparison_figure(report: dict, traces: dict, out_dir) -> Path:
    """Overlay state-norm decay and solver value traces across runs.

    traces maps run label -> (times, norms) from the dense rows.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, (ax_norm, ax_value) = plt.subplots(1, 2, figsize=(11, 4))
    for entry in report["runs"]:
        label = entry["label"]
        times, norms = traces[label]
        ax_norm.semilogy(times, np.maximum(norms, 1e-16), label=label)
        vt = entry["value_trace"]
        if vt["t"]:
            ax_value.plot(vt["t"], vt["V"], label=label)
    ax_norm.set_xlabel("t")
    ax_norm.set_ylabel("|x|")
    ax_norm.legend()
    ax_norm.grid(True, alpha=0.3)
    ax_value.set_xlabel("t")
    ax_value.set_ylabel("V")
    ax_value.legend()
    ax_value.grid(True, alpha=0.3)
    fig.suptitle(f"{report['plant']} from {np.round(report['x0'], 4).tolist()}")
    fig.tight_layout()
    path = out_dir / "comparison.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path

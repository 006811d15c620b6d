"""Figures for the matrix and fill reports, drawn from the CSVs the CLI writes."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

VARIANT_COLORS = {"vision": "#4C72B0", "tactile": "#DD8452", "fused": "#55A868"}


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def matrix_figure(table_rows: list[dict], out_path) -> Path:
    """Grouped bars of mean CV error per task, one bar per variant, with stderr whiskers."""
    tasks = list(dict.fromkeys(r["task"] for r in table_rows))
    variants = list(dict.fromkeys(r["variant"] for r in table_rows))
    lookup = {(r["variant"], r["task"]): (float(r["mean_ml"]), float(r["stderr_ml"])) for r in table_rows}
    width = 0.8 / max(len(variants), 1)
    x = np.arange(len(tasks))
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for i, v in enumerate(variants):
        means = [lookup.get((v, t), (np.nan, 0))[0] for t in tasks]
        errs = [lookup.get((v, t), (np.nan, 0))[1] for t in tasks]
        ax.bar(x + (i - (len(variants) - 1) / 2) * width, means, width, yerr=errs, capsize=3,
               label=v, color=VARIANT_COLORS.get(v))
    ax.set_xticks(x)
    ax.set_xticklabels(tasks)
    ax.set_ylabel("CV error (ml)")
    ax.legend(frameon=False)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    return _save(fig, out_path)


def fill_trace_figure(trace_rows: list[dict], v_expected: float, out_path) -> Path:
    """Estimated and true volume over time, pump state underneath."""
    t = np.array([float(r["t"]) for r in trace_rows])
    est = np.array([float(r["v_estimate"]) for r in trace_rows])
    gt = np.array([float(r["v_gt"]) for r in trace_rows])
    pump = np.array([int(r["pump"]) for r in trace_rows])
    fig, (ax, ax2) = plt.subplots(2, 1, figsize=(6.4, 4.2), sharex=True, gridspec_kw={"height_ratios": [3, 1]})
    ax.plot(t, gt, color="k", lw=1.2, label="ground truth")
    ax.plot(t, est, color=VARIANT_COLORS["fused"], lw=1.2, label="estimate")
    ax.axhline(v_expected, color="0.5", ls="--", lw=0.8, label="target")
    ax.set_ylabel("volume (ml)")
    ax.legend(frameon=False, loc="upper left")
    ax2.step(t, pump, where="post", color="0.3")
    ax2.set_ylabel("pump")
    ax2.set_yticks([0, 1])
    ax2.set_xlabel("time (s)")
    for a in (ax, ax2):
        a.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    return _save(fig, out_path)


def error_histogram_figure(errors, out_path, bins: int = 10) -> Path:
    errors = np.asarray(errors, dtype=float)
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    ax.hist(errors, bins=bins, color=VARIANT_COLORS["fused"], edgecolor="white")
    ax.axvline(errors.mean(), color="k", ls="--", lw=0.8)
    ax.set_xlabel("fill error |target - filled| (ml)")
    ax.set_ylabel("runs")
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    return _save(fig, out_path)


def _save(fig, out_path) -> Path:
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    # no timestamp in the metadata so reruns give identical files
    fig.savefig(out, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return out

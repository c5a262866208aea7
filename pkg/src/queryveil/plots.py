"""Plot emission for optimization traces and sweep reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import InvalidInputError  # noqa: E402

TRACE_PANELS = (
    ("distortion", "Distortion", dict(xlog=True, ylog=True)),
    ("perf_loss", "Performance loss", dict(xlog=True, ylog=True)),
    ("sim_target", "Similarity to target", dict(xlog=True, ylog=False)),
    ("sim_carrier", "Similarity to carrier", dict(xlog=True, ylog=False)),
)


def plot_trace(rows: list[dict], out_dir, label: str = "") -> list[str]:
    """One file per monitored quantity versus iteration."""
    if not rows:
        raise InvalidInputError("empty trace: nothing to plot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    iterations = [r["iteration"] + 1 for r in rows]  # log axis needs > 0
    written = []
    for column, title, axes in TRACE_PANELS:
        fig, ax = plt.subplots(figsize=(4.2, 3.4))
        values = [r[column] for r in rows]
        if axes["ylog"]:
            values = [max(v, 1e-12) for v in values]
        ax.plot(iterations, values, lw=1.2, label=label or None)
        if axes["xlog"]:
            ax.set_xscale("log")
        if axes["ylog"]:
            ax.set_yscale("log")
        ax.set_xlabel("Iteration")
        ax.set_title(title)
        ax.grid(True, alpha=0.4)
        if label:
            ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / f"trace_{column}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(str(path))
    return written


def plot_resolution_sweep(report: dict, out_path) -> str:
    """Similarity (or mAP) versus test-resolution, one curve per attack
    variant (e.g. with and without blurred downsampling)."""
    series = report.get("series", {})
    xs = report.get("test_resolutions", [])
    if not series or not xs:
        raise InvalidInputError("sweep report has no series to plot")
    fig, ax = plt.subplots(figsize=(4.6, 3.6))
    for name, values in series.items():
        ax.plot(xs, values, marker="o", ms=3, lw=1.2, label=name)
    ax.set_xlabel("Test resolution")
    ax.set_ylabel(report.get("metric", "sim_target"))
    ax.grid(True, alpha=0.4)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return str(out_path)


def plot_lambda_sweep(report: dict, out_path) -> str:
    """Distortion and similarity against the distortion weight."""
    rows = report.get("sweep", [])
    if not rows:
        raise InvalidInputError("lambda sweep report is empty")
    lams = [r["lambda"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.6, 3.2))
    ax1.plot(lams, [r["distortion"] for r in rows], marker="o", ms=4)
    ax1.set_xlabel("lambda")
    ax1.set_ylabel("distortion")
    ax1.set_xscale("symlog", linthresh=0.01)
    ax1.grid(True, alpha=0.4)
    ax2.plot(lams, [r["sim_target"] for r in rows], marker="o", ms=4, color="C1")
    ax2.set_xlabel("lambda")
    ax2.set_ylabel("similarity to target")
    ax2.set_xscale("symlog", linthresh=0.01)
    ax2.grid(True, alpha=0.4)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return str(out_path)

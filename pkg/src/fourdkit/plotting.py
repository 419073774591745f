"""Figure rendering for CLI reports.

Everything draws through the non-interactive Agg backend and writes PNG
files next to the JSON/CSV report. Figures carry no timestamp metadata so
reruns produce identical bytes.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0
FIG_WIDTH = 6.0
COLORS = ["#08589e", "#e6550d", "#31a354", "#756bb1", "#636363", "#de2d26"]

PARAMS = {
    "axes.prop_cycle": matplotlib.cycler(color=COLORS),
    "axes.labelsize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": [FIG_WIDTH, FIG_WIDTH * GOLDEN],
    "figure.dpi": 100,
    "lines.linewidth": 1.2,
    "lines.markersize": 3,
    "svg.hashsalt": "fourdkit",
}
_PNG_META = {"Software": None}


@contextmanager
def report_style():
    with matplotlib.rc_context(PARAMS):
        yield


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def _finite(xs):
    return [math.nan if x is None else float(x) for x in xs]


def plot_eval(report: dict, stem: Path) -> list[Path]:
    """Per-frame EPE curves and a per-sequence APD / tau bar chart."""
    stem = Path(stem)
    out = []
    seqs = report["sequences"]
    with report_style():
        fig, (ax0, ax1) = plt.subplots(1, 2, sharex=True)
        for s in seqs:
            pts = _finite(s["per_frame"]["epe_points"])
            flw = _finite(s["per_frame"]["epe_flow"])
            frames = range(1, len(pts) + 1)
            ax0.plot(frames, pts, marker="o", label=s["name"])
            ax1.plot(frames, flw, marker="o", label=s["name"])
        ax0.set_title("dynamic points")
        ax1.set_title("scene flow")
        for ax in (ax0, ax1):
            ax.set_xlabel("frame")
            ax.set_ylabel("EPE [m]")
        if 1 < len(seqs) <= 8:
            ax1.legend()
        out.append(_save(fig, stem.with_name(stem.name + "_epe_per_frame.png")))

        fig, ax = plt.subplots()
        names = [s["name"] for s in seqs]
        x = range(len(names))
        apd = _finite(s["apd"] for s in seqs)
        tau = _finite(s["tau"] for s in seqs)
        ax.bar([i - 0.2 for i in x], apd, width=0.4, label="APD")
        ax.bar([i + 0.2 for i in x], tau, width=0.4, label="tau")
        ax.set_xticks(list(x))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylim(0, 100)
        ax.set_ylabel("%")
        ax.legend()
        out.append(_save(fig, stem.with_name(stem.name + "_inliers.png")))
    return out


def plot_gradcheck(report: dict, stem: Path) -> list[Path]:
    stem = Path(stem)
    with report_style():
        fig, ax = plt.subplots()
        names = [r["loss"] for r in report["losses"]]
        errs = [max(r["max_rel_error"], 1e-16) for r in report["losses"]]
        colors = [COLORS[0] if r["passed"] else COLORS[5] for r in report["losses"]]
        ax.bar(names, errs, color=colors)
        ax.axhline(report["tol"], color=COLORS[4], linestyle="--", label=f"tol = {report['tol']:g}")
        ax.set_yscale("log")
        ax.set_ylabel("max relative error")
        ax.tick_params(axis="x", rotation=30)
        ax.legend()
        return [_save(fig, stem.with_name(stem.name + "_errors.png"))]


def plot_loss(report: dict, stem: Path) -> list[Path]:
    stem = Path(stem)
    with report_style():
        fig, ax = plt.subplots()
        terms = report["terms"]
        names = list(terms)
        vals = [report["weights"][k] * terms[k] for k in names]
        ax.bar(names, vals)
        ax.set_ylabel("weighted term")
        ax.set_title(f"total = {report['total']:.6g}")
        ax.tick_params(axis="x", rotation=30)
        return [_save(fig, stem.with_name(stem.name + "_terms.png"))]

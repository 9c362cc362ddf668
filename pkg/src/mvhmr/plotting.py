"""Report figures, rendered off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "mvhmr",
}
_METADATA = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata=_METADATA)
    plt.close(fig)
    return path


def plot_iterations(trace, path, title="refinement"):
    """MPJPE and mean residual per iteration of one run."""
    with plt.rc_context(_STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.5, 3.0))
        x = np.arange(len(trace.residual_px))
        labels = [str(lv) for lv in trace.levels]
        if all(m is not None for m in trace.mpjpe):
            a1.plot(x, trace.mpjpe, "o-", color="C0")
        a1.set_ylabel("root-aligned MPJPE (mm)")
        a2.plot(x, trace.residual_px, "o-", color="C1")
        a2.set_ylabel("mean residual (px)")
        for ax in (a1, a2):
            ax.set_xticks(x)
            ax.set_xticklabels(labels)
            ax.set_xlabel("iteration (pyramid level)")
        fig.suptitle(title)
        return _save(fig, path)


def plot_suite(report, path):
    """Median primary metric per variant (interquartile bars) and median curves."""
    with plt.rc_context(_STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        names = [s["variant"] for s in report.summary]
        metric = report.primary
        vals = [np.array([r[metric] for r in report.rows if r["variant"] == n]) for n in names]
        med = [np.median(v) for v in vals]
        lo = [m - np.percentile(v, 25) for m, v in zip(med, vals)]
        hi = [np.percentile(v, 75) - m for m, v in zip(med, vals)]
        a1.bar(np.arange(len(names)), med, yerr=[lo, hi], color="0.6", capsize=3)
        a1.set_xticks(np.arange(len(names)))
        a1.set_xticklabels(names, rotation=20, ha="right")
        a1.set_ylabel(f"median {metric}")
        for i, n in enumerate(names):
            curves = np.array([r["curve_mpjpe"] for r in report.rows if r["variant"] == n])
            a2.plot(np.median(curves, axis=0), "o-", label=n, color=f"C{i}")
        a2.set_xlabel("iteration")
        a2.set_ylabel("median root-aligned MPJPE (mm)")
        a2.legend(frameon=False)
        fig.suptitle(f"suite {report.suite}")
        return _save(fig, path)

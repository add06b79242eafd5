"""Figures for the CLI report paths.  Rendered to files with the Agg backend."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}

COLORS = {"naive": "#7f7f7f", "tbgl": "#1f77b4", "ibgl": "#d62728", "fixed_gb": "#2ca02c", "random": "#9467bd"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-stable
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def training_curves(records, path, key: str = "upper_loss") -> Path:
    """Mean (band: min..max over seeds) of ``key`` against outer step, per strategy."""
    by = defaultdict(list)
    for rec in records:
        rows = [r for r in rec.rows if r.get("phase") == "outer" and key in r]
        if rows:
            by[rec.meta.get("strategy", rec.name)].append(np.array([r[key] for r in rows]))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, curves in by.items():
            n = min(len(c) for c in curves)
            arr = np.stack([c[:n] for c in curves])
            steps = np.arange(n)
            color = COLORS.get(name)
            ax.plot(steps, arr.mean(axis=0), label=name, color=color, lw=1.2)
            ax.fill_between(steps, arr.min(axis=0), arr.max(axis=0), color=color, alpha=0.15, lw=0)
        ax.set_xlabel("outer step")
        ax.set_ylabel(key.replace("_", " "))
        ax.legend()
        return _save(fig, path)


def metric_bars(summary_rows: list[dict], path, metric: str = "psnr", label: str = "held-out PSNR (dB)") -> Path:
    """Bar per row using ``<metric>_mean`` and ``<metric>_std``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = [r["strategy"] for r in summary_rows]
        means = [r[f"{metric}_mean"] for r in summary_rows]
        stds = [r[f"{metric}_std"] for r in summary_rows]
        ax.bar(names, means, yerr=stds, capsize=3, color=[COLORS.get(n, "#555555") for n in names])
        ax.set_ylabel(label)
        lo = min(m - s for m, s in zip(means, stds))
        hi = max(m + s for m, s in zip(means, stds))
        pad = 0.1 * (hi - lo) + 1e-9
        ax.set_ylim(lo - pad if metric == "psnr" else 0, hi + pad)
        return _save(fig, path)


def delta_sweep(rows: list[dict], path) -> Path:
    """FD-term error against delta on log-log axes, one line per seed, with a slope-2 guide."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        by = defaultdict(list)
        for r in rows:
            by[r["seed"]].append((r["delta"], r["fd_error"]))
        for seed, pts in by.items():
            d, e = np.array(pts).T
            ax.loglog(d, e, color="#1f77b4", alpha=0.4, lw=0.8, marker=".")
        d = np.array(sorted({r["delta"] for r in rows}))
        e0 = np.median([r["fd_error"] for r in rows if r["delta"] == d[-1]])
        ax.loglog(d, e0 * (d / d[-1]) ** 2, "k--", lw=1, label="slope 2")
        ax.set_xlabel("delta")
        ax.set_ylabel("FD mixed-product error")
        ax.legend()
        return _save(fig, path)


def k_sweep(rows: list[dict], path) -> Path:
    """Relative error of the unrolled hypergradient against k."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        by = defaultdict(list)
        for r in rows:
            by[r["seed"]].append((r["k"], r["rel_error"]))
        for seed, pts in by.items():
            k, e = np.array(pts).T
            ax.semilogy(k, np.maximum(e, 1e-17), color="#d62728", alpha=0.4, lw=0.8, marker=".")
        ax.set_xlabel("inner steps k")
        ax.set_ylabel("relative error vs implicit")
        return _save(fig, path)

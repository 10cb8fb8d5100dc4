"""Figures written next to the CSV/JSON outputs.

SVG output is made byte-deterministic by fixing matplotlib's hash salt and
dropping the creation date, so reruns produce diffable files.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "svg.hashsalt": "flowdistill",
    "svg.fonttype": "none",
    "figure.figsize": (5.0, 3.5),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = path.suffix.lstrip(".") or "svg"
    meta = {"Date": None} if fmt == "svg" else None
    fig.savefig(path, format=fmt, metadata=meta)
    plt.close(fig)
    return path


def plot_curves(curves: dict[str, list[float]], path, ylabel: str = "loss",
                logy: bool = True, smooth: int = 1) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for name, ys in curves.items():
            ys = np.asarray(ys, dtype=float)
            if smooth > 1 and len(ys) >= smooth:
                ys = np.convolve(ys, np.ones(smooth) / smooth, mode="valid")
            ax.plot(np.arange(len(ys)), ys, label=name, linewidth=1.0)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_sweep(weights, distances, path, teacher_w: float | None = None) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        ax.plot(weights, distances, marker="o", linewidth=1.0)
        if teacher_w is not None:
            ax.axvline(teacher_w, linestyle=":", color="grey", label=f"teacher w={teacher_w}")
            ax.legend(frameon=False)
        ax.set_xlabel("guidance weight w")
        ax.set_ylabel("sliced Wasserstein to held-out")
        fig.tight_layout()
        return _save(fig, path)


def plot_histograms(hists: dict[str, dict], path, xlabel: str = "radius") -> Path:
    """Overlay fixed-range histograms as normalized step curves."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for name, h in hists.items():
            lo, hi = h["range"]
            counts = np.asarray(h["counts"], dtype=float)
            edges = np.linspace(lo, hi, h["bins"] + 1)
            density = counts / max(counts.sum(), 1.0) / np.diff(edges)
            ax.stairs(density, edges, label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("density")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_samples(x, c, path, reference=None) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 4.0))
        if reference is not None:
            ax.scatter(reference[:, 0], reference[:, 1], s=2, color="lightgrey", label="data")
        ax.scatter(x[:, 0], x[:, 1], s=2, c=np.asarray(c), cmap="tab10", vmin=0, vmax=9)
        ax.set_aspect("equal")
        fig.tight_layout()
        return _save(fig, path)

"""Figure rendering for run reports (file output only, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

ENERGY_FIELDS = ("e_data", "e_scale", "e_blendshape", "e_joint", "e_landmark")


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return Path(path)


def plot_trace(trace, path):
    """Mean correspondence distance and energy terms per outer iteration."""
    its = [r.iteration for r in trace]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9.0, 3.6))
    ax0.plot(its, [r.mean_distance for r in trace], "o-", ms=3)
    ax0.set_xlabel("outer iteration")
    ax0.set_ylabel("mean distance [mm]")
    ax0.set_yscale("log")
    ax0.grid(alpha=0.3)
    for name in ENERGY_FIELDS:
        vals = np.array([getattr(r, name) for r in trace])
        ax1.plot(its, np.maximum(vals, 1e-30), label=name.replace("e_", "E_"))
    ax1.set_xlabel("outer iteration")
    ax1.set_ylabel("energy term (unweighted)")
    ax1.set_yscale("log")
    ax1.legend(fontsize=7)
    ax1.grid(alpha=0.3)
    return _save(fig, path)


def plot_residual_histogram(distances, path, bins=60):
    """Distribution of the final retained closest-point distances."""
    d = np.abs(np.asarray(distances, dtype=np.float64))
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.hist(d, bins=bins, color="#4878a8", edgecolor="white", linewidth=0.3)
    ax.axvline(d.mean(), color="#a84848", lw=1.2,
               label=f"MAE = {d.mean():.3f} mm")
    ax.set_xlabel("closest-point distance [mm]")
    ax.set_ylabel("count")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_sweep(rows, x_key, path, log_x=False):
    """Surface / landmark MAE against a swept setting."""
    x = [r[x_key] for r in rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.plot(x, [r["surface_mae"] for r in rows], "o-", ms=4,
            label="surface MAE")
    if any(r.get("landmark_mae") is not None for r in rows):
        ax.plot(x, [r["landmark_mae"] for r in rows], "s--", ms=4,
                label="landmark MAE")
    if log_x:
        ax.set_xscale("log")
    ax.set_xlabel(x_key.replace("_", " "))
    ax.set_ylabel("MAE [mm]")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)

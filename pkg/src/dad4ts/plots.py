"""Static diagnostic plots over a run's sample dumps.

Color convention: red for real data, blue for generated data, green for
generated data the selector picked, with darker green meaning a higher
selection probability.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigurationError

PLOT_KINDS = ("kde", "pca_scatter", "series_overlay")


def _kde_curve(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Gaussian kernel density with Scott's bandwidth."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        return np.zeros_like(grid)
    sigma = np.std(values)
    bandwidth = sigma * values.size ** (-1.0 / 5.0) if sigma > 0 else 1.0
    bandwidth = max(bandwidth, 1e-3)
    diffs = (grid[:, None] - values[None, :]) / bandwidth
    return np.exp(-0.5 * diffs**2).sum(axis=1) / (values.size * bandwidth * np.sqrt(2 * np.pi))


def _load_dump(run_dir: Path, cell: str | None) -> tuple[str, dict]:
    dumps = sorted((run_dir / "cells").glob("*/samples.npz")) if (run_dir / "cells").exists() else []
    if cell is not None:
        dumps = [d for d in dumps if d.parent.name == cell]
    if not dumps:
        raise ConfigurationError(f"no sample dumps found under {run_dir}")
    path = dumps[0]
    with np.load(path) as data:
        return path.parent.name, {k: data[k] for k in data.files}


def render_plot(run_dir: str | Path, kind: str, out_path: str | Path, cell: str | None = None) -> Path:
    if kind not in PLOT_KINDS:
        raise ConfigurationError(f"unknown plot kind {kind!r}; known: {PLOT_KINDS}")
    run_dir = Path(run_dir)
    cell_name, dump = _load_dump(run_dir, cell)
    real = dump["real_windows"]
    gen = dump["generated_windows"]
    probs = dump["probs"]
    mask = dump["mask"] > 0.5
    selected = gen[mask]
    sel_probs = probs[mask]

    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=120)
    if kind == "kde":
        pool = np.concatenate([real.ravel(), gen.ravel()]) if gen.size else real.ravel()
        grid = np.linspace(pool.min() - 1.0, pool.max() + 1.0, 256)
        ax.plot(grid, _kde_curve(real, grid), color="red", label="real")
        if gen.size:
            ax.plot(grid, _kde_curve(gen, grid), color="blue", label="generated")
        if selected.size:
            ax.plot(grid, _kde_curve(selected, grid), color="green", label="selected")
        else:
            ax.plot([], [], color="green", label="selected (none)")
        ax.set_xlabel("value")
        ax.set_ylabel("density")
    elif kind == "pca_scatter":
        rp, gp = dump["real_proj"], dump["generated_proj"]
        ax.scatter(rp[:, 0], rp[:, 1], c="red", s=14, label="real")
        if gp.size:
            ax.scatter(gp[:, 0], gp[:, 1], c="blue", s=14, label="generated")
        if mask.any():
            shade = 0.3 + 0.7 * sel_probs
            ax.scatter(
                gp[mask][:, 0], gp[mask][:, 1],
                color=[(0.0, 0.5 * s, 0.0) for s in shade], s=20, label="selected",
            )
        else:
            ax.scatter([], [], c="green", label="selected (none)")
        ax.set_xlabel("component 1")
        ax.set_ylabel("component 2")
    else:  # series_overlay
        for row in real[:: max(1, len(real) // 8)]:
            ax.plot(row, color="red", alpha=0.35, linewidth=0.9)
        for row in gen[:: max(1, len(gen) // 8)] if gen.size else []:
            ax.plot(row, color="blue", alpha=0.35, linewidth=0.9)
        if mask.any():
            for row, p in zip(selected[:8], sel_probs[:8]):
                ax.plot(row, color=(0.0, 0.6, 0.0), alpha=0.3 + 0.7 * float(p), linewidth=1.1)
            handles = [
                plt.Line2D([], [], color="red", label="real"),
                plt.Line2D([], [], color="blue", label="generated"),
                plt.Line2D([], [], color="green", label="selected"),
            ]
        else:
            handles = [
                plt.Line2D([], [], color="red", label="real"),
                plt.Line2D([], [], color="blue", label="generated"),
                plt.Line2D([], [], color="green", label="selected (none)"),
            ]
        ax.legend(handles=handles, fontsize=8)
        ax.set_xlabel("step")
        ax.set_ylabel("normalized value")
    if kind != "series_overlay":
        ax.legend(fontsize=8)
    ax.set_title(f"{kind} - {cell_name}")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, format="png")
    plt.close(fig)
    return out_path

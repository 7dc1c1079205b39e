"""Delimited output and figure rendering for the CLI report paths.

Figures are rendered headlessly to PNG next to the CSV/JSON they illustrate;
all numeric text output uses full round-trip decimal formatting.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .storage import format_float

plt.rcParams.update(
    {
        "figure.figsize": (6.0, 3.8),
        "figure.dpi": 110,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "font.size": 9,
    }
)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    lines = [",".join(header)]
    for row in rows:
        cells = [
            format_float(c) if isinstance(c, (float, np.floating)) else str(c)
            for c in row
        ]
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_json(path, payload: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True, default=_coerce))
    return path


def _coerce(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj)}")


def _finish(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_observers(rows, path) -> Path:
    """One panel per observable against time."""
    names = sorted({name for _, name, _ in rows})
    fig, axes = plt.subplots(len(names), 1, figsize=(6.0, 2.0 * len(names)), sharex=True)
    axes = np.atleast_1d(axes)
    for ax, name in zip(axes, names):
        pts = np.array([(t, v) for t, n, v in rows if n == name])
        ax.plot(pts[:, 0], pts[:, 1], lw=1.0)
        ax.set_ylabel(name)
    axes[-1].set_xlabel("t")
    return _finish(fig, path)


def plot_decay(fit, path) -> Path:
    fig, ax = plt.subplots()
    ax.loglog(fit.times, fit.sup_values, "o", ms=3, label="sup |S(t) P u0|")
    ax.loglog(
        fit.times,
        np.exp(fit.intercept) * fit.times**fit.slope,
        "-",
        label=f"fit slope {fit.slope:.3f}",
    )
    ax.set_xlabel("t")
    ax.set_ylabel("sup amplitude")
    ax.legend()
    return _finish(fig, path)


def plot_block_norms(per_zeta, path) -> Path:
    fig, ax = plt.subplots()
    mags = [row[1] for row in per_zeta]
    norms = [row[2] for row in per_zeta]
    ax.plot(mags, norms, ".", ms=4)
    ax.set_xlabel("|zeta|")
    ax.set_ylabel("block norm")
    return _finish(fig, path)


def plot_residual_curve(times, residuals, path) -> Path:
    fig, ax = plt.subplots()
    ax.semilogy(times, np.maximum(residuals, 1e-300), lw=1.0)
    ax.set_xlabel("t")
    ax.set_ylabel("residual")
    return _finish(fig, path)


def plot_certificate(cert, path) -> Path:
    names = list(cert.norms)
    vals = [max(cert.norms[k], 1e-300) for k in names]
    fig, ax = plt.subplots(figsize=(6.0, 0.35 * len(names) + 1.2))
    ax.barh(range(len(names)), vals, log=True)
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("norm value")
    return _finish(fig, path)

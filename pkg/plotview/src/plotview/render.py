"""Figure and table rendering.

- error_vs_time: the series as loaded, one legend entry per label
- energy_error_vs_time_log: |H(t) - H(0)| / |H(0)| per file on a log
  axis, values below 1e-18 clamped to the floor with a warning
- convergence_table: mean error per file against the label-supplied
  spacings, with pairwise rates and the least-squares slope of
  log(mean error) versus log(spacing)
- rendering is deterministic: fixed figure geometry and metadata, no
  embedded timestamps, so identical inputs give identical bytes
"""

from __future__ import annotations

import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # headless backend; must be picked before pyplot
import matplotlib.pyplot as plt
import numpy as np

from .series import Series

KINDS = ("error_vs_time", "energy_error_vs_time_log", "convergence_table")
LOG_FLOOR = 1e-18
_PNG_METADATA = {"Software": "plotview"}  # fixed text chunk, keeps reruns byte-identical


def relative_energy_error(series):
    """Map an H(t) track to |H(t) - H(0)| / |H(0)|."""
    h0 = float(series.values[0])
    if h0 == 0.0:
        raise ValueError(f"series {series.label!r} starts at H = 0")
    return Series(
        series.label,
        series.time,
        np.abs(series.values - h0) / abs(h0),
        style=series.style,
    )


def floored(values, label):
    """Clamp values below the log floor.

    Scattered zeros clamp silently (relative error traces always start
    at an exact zero); a series that sits entirely below the floor is
    degenerate and warns.
    """
    vals = np.asarray(values, dtype=float)
    tiny = vals < LOG_FLOOR
    if np.all(tiny):
        warnings.warn(
            f"series {label!r} is entirely below 1e-18 and was clamped "
            f"to the log floor"
        )
    if np.any(tiny):
        vals = np.maximum(vals, LOG_FLOOR)
    return vals


def build_figure(collection, logy, ylabel):
    """Assemble the line figure; exposed so tests can inspect legends."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2), dpi=150)
    for s in collection:
        vals = floored(s.values, s.label) if logy else s.values
        ax.plot(s.time, vals, linestyle=s.style, label=s.label)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel(ylabel)
    ax.legend(loc="best")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return fig


def convergence_table(collection):
    """Text table of mean error versus spacing.

    Labels must parse as the mesh spacings.  Rows are sorted coarse to
    fine; the rate column holds log(e_prev/e)/log(dx_prev/dx) between
    successive resolutions and the footer carries the least-squares
    slope over all of them.
    """
    if len(collection) < 2:
        raise ValueError("a convergence table needs at least two resolutions")
    rows = []
    for s in collection:
        try:
            dx = float(s.label)
        except ValueError:
            raise ValueError(
                f"label {s.label!r} is not a numeric spacing; pass --labels "
                f"with one mesh spacing per file"
            ) from None
        rows.append((dx, float(np.mean(s.values))))
    rows.sort(key=lambda r: -r[0])
    dxs = np.array([r[0] for r in rows])
    means = np.array([r[1] for r in rows])
    if np.any(dxs <= 0.0) or np.any(means <= 0.0):
        raise ValueError("spacings and mean errors must be positive for a log-log fit")
    slope = float(np.polyfit(np.log(dxs), np.log(means), 1)[0])
    lines = ["# spacing      mean_error      rate"]
    for i, (dx, m) in enumerate(rows):
        if i == 0:
            rate = "      -"
        else:
            prev_dx, prev_m = rows[i - 1]
            rate = f"{np.log(prev_m / m) / np.log(prev_dx / dx):7.3f}"
        lines.append(f"{dx:<12.6g} {m:<15.6e} {rate}")
    lines.append(f"# least-squares slope: {slope:.3f}")
    return "\n".join(lines) + "\n"


def render(collection, kind, out):
    """Render the collection to `out` (PNG for plots, text for tables)."""
    if not collection:
        raise ValueError("nothing to render")
    out = Path(out)
    if kind == "error_vs_time":
        fig = build_figure(collection, logy=False, ylabel="relative error")
        fig.savefig(out, metadata=dict(_PNG_METADATA))
        plt.close(fig)
    elif kind == "energy_error_vs_time_log":
        errs = [relative_energy_error(s) for s in collection]
        fig = build_figure(errs, logy=True, ylabel="|H(t) - H(0)| / |H(0)|")
        fig.savefig(out, metadata=dict(_PNG_METADATA))
        plt.close(fig)
    elif kind == "convergence_table":
        out.write_text(convergence_table(collection), encoding="utf-8")
    else:
        raise ValueError(f"unknown render kind {kind!r}; choose from {', '.join(KINDS)}")
    return out

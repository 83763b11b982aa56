"""Figure rendering for the solver's CSV artifacts.

Consumes only the documented CSV/JSON schemas, never the solver itself, so
figures are regenerable from archived run directories alone. Every build
happens under a pinned Agg style: the same table yields the same image bytes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.ticker import MaxNLocator

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9.0,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "lines.markersize": 4.0,
    "legend.frameon": False,
    "svg.hashsalt": "bihum-plots",
}

# required columns per plot kind; extra columns are welcome
SCHEMAS = {
    "decay": ("epsilon", "terminal_norm", "control_norm"),
    "ratio-heatmap": ("s", "lambda", "ratio"),
    "fixedpoint": ("iter", "distance"),
    "weights": ("x", "t", "alpha", "xi"),
}


class SchemaMismatchError(ValueError):
    """Input table does not carry the columns its plot kind needs."""

    def __init__(self, message: str, missing=()):
        super().__init__(message)
        self.missing = tuple(missing)


@dataclass(frozen=True)
class PlotJob:
    """One rendering task: a CSV artifact in, an image file out."""

    kind: str
    csv_path: Path
    out_path: Path
    summary_path: Optional[Path] = None   # decay: JSON holding the fitted slope
    title: Optional[str] = None

    def __post_init__(self):
        if self.kind not in SCHEMAS:
            raise ValueError(
                f"unknown plot kind {self.kind!r}; expected one of "
                f"{sorted(SCHEMAS)}")
        object.__setattr__(self, "csv_path", Path(self.csv_path))
        object.__setattr__(self, "out_path", Path(self.out_path))
        if self.summary_path is not None:
            object.__setattr__(self, "summary_path", Path(self.summary_path))
        if not self.csv_path.is_file():
            raise FileNotFoundError(
                f"input table {self.csv_path} does not exist")

    def resolved_summary(self) -> Path:
        if self.summary_path is not None:
            return self.summary_path
        return self.csv_path.with_name("sweep_summary.json")


def read_table(path) -> dict:
    """Column-major view of a CSV file; {} when the file is empty."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        return {}
    header = rows[0]
    cols = {name: [] for name in header}
    for r in rows[1:]:
        for name, cell in zip(header, r):
            cols[name].append(cell)
    return cols


def _require(table: dict, kind: str, path) -> None:
    missing = [c for c in SCHEMAS[kind] if c not in table]
    if missing:
        raise SchemaMismatchError(
            f"{path} is not a {kind} table; missing columns: "
            + ", ".join(missing), missing)


def _numeric(col) -> np.ndarray:
    return np.asarray([float(v) for v in col])


def _decay_figure(job: PlotJob, table: dict):
    eps = _numeric(table["epsilon"])
    term = _numeric(table["terminal_norm"])
    ctrl = _numeric(table["control_norm"])
    slope = float(json.loads(job.resolved_summary().read_text())
                  ["fitted_exponent"])
    fig, ax = plt.subplots()
    ax.loglog(eps, term, "o-", label="terminal norm")
    ax.loglog(eps, ctrl, "s-", label="control norm")
    ax.invert_xaxis()                 # the ladder runs toward small epsilon
    ax.set_xlabel("epsilon")
    ax.set_ylabel("norm")
    ax.legend(loc="upper right")
    ax.text(0.04, 0.06, f"slope {slope:.3f}", transform=ax.transAxes)
    ax.set_title(job.title or "penalized sweep decay")
    return fig


def _heatmap_figure(job: PlotJob, table: dict):
    s = _numeric(table["s"])
    lam = _numeric(table["lambda"])
    ratio = _numeric(table["ratio"])
    s_vals = sorted(set(s.tolist()))
    lam_vals = sorted(set(lam.tolist()))
    grid = np.full((len(lam_vals), len(s_vals)), np.nan)
    for sv, lv, rv in zip(s, lam, ratio):
        grid[lam_vals.index(lv), s_vals.index(sv)] = rv
    if np.isnan(grid).any():
        raise SchemaMismatchError(
            f"{job.csv_path} does not cover the full (s, lambda) grid")
    fig, ax = plt.subplots()
    im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(s_vals)), [f"{v:g}" for v in s_vals])
    ax.set_yticks(range(len(lam_vals)), [f"{v:g}" for v in lam_vals])
    ax.grid(False)
    ax.set_xlabel("s")
    ax.set_ylabel("lambda")
    fig.colorbar(im, ax=ax, label="lhs / rhs ratio")
    ax.set_title(job.title or "weighted inequality ratios")
    return fig


def _fixedpoint_figure(job: PlotJob, table: dict):
    it = _numeric(table["iter"])
    fig, ax = plt.subplots()
    ax.semilogy(it, _numeric(table["distance"]), "o-",
                label="iterate distance")
    if "terminal_norm" in table:
        ax.semilogy(it, _numeric(table["terminal_norm"]), "s--",
                    label="terminal norm")
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax.set_xlabel("iteration")
    ax.set_ylabel("value")
    ax.legend(loc="upper right")
    ax.set_title(job.title or "fixed point trace")
    return fig


def _weights_figure(job: PlotJob, table: dict):
    if "y" in table:
        raise SchemaMismatchError(
            f"{job.csv_path} holds a 2D weight table; profile plots need the "
            "1D schema (x, t, alpha, xi)")
    x = _numeric(table["x"])
    t = _numeric(table["t"])
    alpha = _numeric(table["alpha"])
    xi = _numeric(table["xi"])
    t_vals = sorted(set(t.tolist()))
    picks = [t_vals[i] for i in
             sorted({int(round(f * (len(t_vals) - 1))) for f in
                     (0.0, 0.25, 0.5, 0.75, 1.0)})]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.4))
    for tv in picks:
        m = t == tv
        order = np.argsort(x[m])
        ax1.plot(x[m][order], alpha[m][order], label=f"t = {tv:.3g}")
        ax2.plot(x[m][order], xi[m][order])
    ax1.set_ylabel("alpha")
    ax2.set_ylabel("xi")
    for ax in (ax1, ax2):
        ax.set_xlabel("x")
    ax1.legend(fontsize=7)
    fig.suptitle(job.title or "weight profiles")
    return fig


_BUILDERS = {
    "decay": _decay_figure,
    "ratio-heatmap": _heatmap_figure,
    "fixedpoint": _fixedpoint_figure,
    "weights": _weights_figure,
}


def _build(job: PlotJob):
    table = read_table(job.csv_path)
    _require(table, job.kind, job.csv_path)
    return _BUILDERS[job.kind](job, table)


def build_figure(job: PlotJob):
    """The figure a job would save, for inspection without file output."""
    with plt.rc_context(STYLE):
        return _build(job)


def render(job: PlotJob) -> Path:
    """Build and save the figure; returns the output path."""
    with plt.rc_context(STYLE):
        fig = _build(job)
        Path(job.out_path).parent.mkdir(parents=True, exist_ok=True)
        sfx = Path(job.out_path).suffix.lower()
        kw = {}
        # strip writer stamps so identical tables give identical bytes
        if sfx == ".png":
            kw["metadata"] = {"Software": None}
        elif sfx == ".svg":
            kw["metadata"] = {"Date": None}
        fig.savefig(job.out_path, **kw)
        plt.close(fig)
    return Path(job.out_path)

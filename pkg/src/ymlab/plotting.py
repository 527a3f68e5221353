"""PNG figures for run outputs (Agg backend, no display needed)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .monitors import conc_key  # noqa: E402

plt.rcParams.update({
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
})


def _column(records, key):
    t = np.array([r["t"] for r in records if key in r])
    v = np.array([r[key] for r in records if key in r], dtype=float)
    return t, v


def _plot(ax, records, key, label=None, log=True, **kw):
    t, v = _column(records, key)
    if v.size == 0:
        return
    if log and np.all(v > 0):
        ax.semilogy(t, v, label=label or key, **kw)
    else:
        ax.plot(t, v, label=label or key, **kw)


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_ym_series(records: list[dict], out_dir, radii=()) -> list[Path]:
    """energy.png (energy, sup|F|, sup|grad|) and, with radii, concentration.png."""
    out_dir = Path(out_dir)
    paths = []
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    _plot(axes[0], records, "energy")
    axes[0].set_title("energy")
    _plot(axes[1], records, "sup_F", "sup |F|")
    axes[1].set_title("sup |F|")
    _plot(axes[2], records, "grad_inf", "sup |D*F|")
    if any("e_theta" in r for r in records):
        _plot(axes[2], records, "e_theta", "e(A, theta)")
    axes[2].set_title("criticality")
    axes[2].legend()
    for ax in axes:
        ax.set_xlabel("t")
    paths.append(_save(fig, out_dir / "energy.png"))
    if radii:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for r in radii:
            _plot(ax, records, conc_key(r), f"r = {r:g}")
        ax.set_xlabel("t")
        ax.set_ylabel("r^(4-n) int_B |F|^2")
        ax.set_title("concentration profile")
        ax.legend()
        paths.append(_save(fig, out_dir / "concentration.png"))
    return paths


def plot_hym_series(records: list[dict], out_dir) -> list[Path]:
    """hym.png: trace-free norm, sup|K| and the two identity diagnostics."""
    out_dir = Path(out_dir)
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    _plot(axes[0], records, "tracefree_l2", "||F_perp||")
    _plot(axes[0], records, "sup_K", "sup |K|")
    axes[0].legend()
    axes[0].set_title("convergence")
    _plot(axes[1], records, "det_h_drift", "|det h - 1|")
    _plot(axes[1], records, "trace_identity_residual", "trace identity")
    axes[1].legend()
    axes[1].set_title("identities")
    _plot(axes[2], records, "min_eig_H", log=False)
    axes[2].set_title("min eig H")
    for ax in axes:
        ax.set_xlabel("t")
    return [_save(fig, out_dir / "hym.png")]


def plot_refinement(levels: list[dict], out_path) -> Path:
    """sup|F| against t, one line per lattice size."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for lv in levels:
        _plot(ax, lv["records"], "sup_F", f"N = {lv['N']}")
    ax.set_xlabel("t")
    ax.set_ylabel("sup |F|")
    ax.set_title("refinement study")
    ax.legend()
    return _save(fig, Path(out_path))

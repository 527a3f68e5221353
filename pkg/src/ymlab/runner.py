"""Run orchestration behind the CLI: runs, resumes, gradient checks, refinement studies."""
from __future__ import annotations

import logging
import time
import warnings
from pathlib import Path
from typing import Callable

import numba
import numpy as np

from . import __version__, lie
from .calculus import curvature, l2_inner, ym_gradient
from .config import ConfigError, RunConfig, config_digest, parse_config
from .flow import FlowState, energy, evaluate, run_flow
from .hym import (HermitianMetricField, HymState, conformal_normalize, hym_operator, run_hym,
                  slope_lambda)
from .initial import initial_connection, initial_metric
from .io import (Checkpoint, load_checkpoint, read_csv, save_checkpoint, truncate_csv, write_csv,
                 write_summary)
from .lattice import ConnectionField, TwistCocycle, build_torus, random_connection
from .monitors import MonitorSuite, blow_up_detector, conc_key, gap_test

log = logging.getLogger(__name__)


def set_threads(requested: int) -> int:
    """Apply the numba thread count; returns the count actually in effect."""
    n = max(1, min(int(requested), numba.config.NUMBA_NUM_THREADS))
    with warnings.catch_warnings():
        # the kernels are serial; threading-layer probing warnings are noise
        warnings.simplefilter("ignore", numba.NumbaWarning)
        numba.set_num_threads(n)
    return n


class _CsvStream:
    """Appends records to the run CSV as they are produced."""

    def __init__(self, path: Path, resume_step: int | None = None):
        self.path = path
        self.columns = None
        if resume_step is not None and path.exists():
            self.columns = truncate_csv(path, resume_step)

    def __call__(self, rec: dict) -> None:
        if self.columns is None:
            self.columns = write_csv(self.path, [rec])
        else:
            write_csv(self.path, [rec], self.columns, append=True)


def _is_monotone(records: list[dict], key: str, tolerance: float) -> bool:
    vals = [r[key] for r in records]
    return all(b <= a + tolerance * (1.0 + abs(a)) for a, b in zip(vals, vals[1:]))


def _finish_figures(config: RunConfig, records, out_dir: Path) -> list[str]:
    if not config.get("output", "figures"):
        return []
    from . import plotting
    if config.mode == "hym":
        paths = plotting.plot_hym_series(records, out_dir)
    else:
        paths = plotting.plot_ym_series(records, out_dir, config.monitor_config().radii)
    return [p.name for p in paths]


# -- Yang-Mills runs ------------------------------------------------------------------

def _run_ym(config: RunConfig, out_dir: Path, ck: Checkpoint | None) -> tuple[dict, list[dict]]:
    geom, twist = config.lattice()
    fcfg = config.flow_config()
    mcfg = config.monitor_config()
    cadence = config.get("output", "cadence")
    every = config.get("output", "checkpoint_every")
    monitors = MonitorSuite(mcfg, geom, twist)
    if ck is None:
        A = initial_connection(config)
        state = FlowState.initial(A, fcfg.dt_init)
        start, energy0 = 0, state.energy
    else:
        A = ConnectionField(geom, twist, ck.fields[0])
        F, G = evaluate(A)
        state = FlowState(ck.t, A, F, G, energy(F), ck.dt, ck.accepted, ck.rejected,
                          ck.dissipation)
        monitors.load_state_dict(ck.extra.get("monitors", {}))
        start, energy0 = ck.step, ck.extra.get("energy0", state.energy)
    written: list[str] = []

    def checkpoint(step: int, st: FlowState, name: str | None = None) -> None:
        name = name or f"checkpoint_{step:08d}.ymck"
        save_checkpoint(out_dir / name, Checkpoint(
            "connection", geom, twist, [st.A.data], config.to_text(), st.t, st.step,
            st.dissipation, step, st.accepted, st.rejected,
            {"monitors": monitors.state_dict(), "energy0": energy0}))
        written.append(name)

    def on_step(step: int, st: FlowState) -> None:
        if every and step % every == 0:
            checkpoint(step, st)

    stream = _CsvStream(out_dir / config.get("output", "csv"), start if ck else None)
    if ck is None and every:
        checkpoint(0, state)
    out = run_flow(state, fcfg, monitors, cadence, on_step=on_step, start_step=start,
                   on_record=stream)
    checkpoint(out.steps, out.state, "checkpoint_final.ymck")
    recs = out.records
    final = out.state
    gap = gap_test(final.A, fcfg.gtol, mcfg.flat_tol)
    drop = energy0 - final.energy
    summary = {
        "outcome": out.outcome,
        "detector": blow_up_detector(recs, mcfg, out.outcome),
        "verdict": gap.verdict,
        "energy_initial": energy0,
        "energy_final": final.energy,
        "sup_F_final": recs[-1]["sup_F"],
        "grad_inf_final": final.grad_inf,
        "t_final": final.t,
        "steps": out.steps,
        "accepted": final.accepted,
        "rejected": final.rejected,
        "dissipation": final.dissipation,
        "energy_identity_rel_error": abs(drop - final.dissipation) / max(abs(drop), 1e-300),
        "energy_monotone": _is_monotone(recs, "energy", fcfg.tolerance),
        "epsreg_samples": len(monitors.epsreg),
        "epsreg_premise_true": sum(r.premise for r in monitors.epsreg),
        "epsreg_violations": len(monitors.violations),
        "tracefree_l2_final": recs[-1]["tracefree_l2"],
        "checkpoints": written,
    }
    if "e_theta" in recs[-1]:
        summary["e_theta_final"] = recs[-1]["e_theta"]
        summary["chern_drift_max"] = max(r["chern_drift"] for r in recs)
    for r in mcfg.radii:
        summary[f"{conc_key(r)}_final"] = recs[-1][conc_key(r)]
    return summary, recs


# -- Hermitian-Yang-Mills runs --------------------------------------------------------

def _run_hym(config: RunConfig, out_dir: Path, ck: Checkpoint | None) -> tuple[dict, list[dict]]:
    hcfg = config.hym_config()
    cadence = config.get("output", "cadence")
    every = config.get("output", "checkpoint_every")
    K0, hol = initial_metric(config)
    cgeom = K0.geometry
    extra: dict = {}
    if ck is None:
        if config.get("hym", "normalize"):
            H0, phi = conformal_normalize(K0, hol)
            extra["phi_range"] = float(phi.max() - phi.min())
        else:
            H0 = K0
        state = HymState.initial(H0, hol, hcfg.dt_init)
        start = 0
    else:
        H0 = HermitianMetricField(cgeom, ck.fields[1])
        H = HermitianMetricField(cgeom, ck.fields[0])
        lam = slope_lambda(cgeom, hol.twist)
        F, K = hym_operator(H, hol, lam)
        state = HymState(ck.t, H, F, K, ck.dt, lam, ck.accepted, ck.rejected)
        start = ck.step
    geom, twist = cgeom.lattice, hol.twist
    written: list[str] = []

    def checkpoint(step: int, st: HymState, name: str | None = None) -> None:
        name = name or f"checkpoint_{step:08d}.ymck"
        save_checkpoint(out_dir / name, Checkpoint(
            "metric", geom, twist, [st.H.data, H0.data], config.to_text(), st.t, st.step,
            0.0, step, st.accepted, st.rejected, {}))
        written.append(name)

    def on_step(step: int, st: HymState) -> None:
        if every and step % every == 0:
            checkpoint(step, st)

    stream = _CsvStream(out_dir / config.get("output", "csv"), start if ck else None)
    if ck is None and every:
        checkpoint(0, state)
    out = run_hym(state, hol, hcfg, cadence, H0=H0, ktol=config.get("hym", "ktol"),
                  on_step=on_step, start_step=start, on_record=stream)
    checkpoint(out.steps, out.state, "checkpoint_final.ymck")
    recs = out.records
    summary = {
        "outcome": out.outcome,
        "lambda": out.state.lam,
        "t_final": out.state.t,
        "steps": out.steps,
        "accepted": out.state.accepted,
        "rejected": out.state.rejected,
        "sup_K_final": recs[-1]["sup_K"],
        "tracefree_l2_initial": recs[0]["tracefree_l2"],
        "tracefree_l2_final": recs[-1]["tracefree_l2"],
        "tracefree_monotone": _is_monotone(recs, "tracefree_l2", hcfg.tolerance),
        "det_h_drift_max": max(r["det_h_drift"] for r in recs),
        "trace_identity_residual_max": max(r["trace_identity_residual"] for r in recs),
        "min_eig_H_min": min(r["min_eig_H"] for r in recs),
        "checkpoints": written,
        **extra,
    }
    return summary, recs


def run_experiment(config: RunConfig, out_dir, checkpoint: Checkpoint | None = None) -> dict:
    """Execute a run, writing CSV, summary, checkpoints and figures into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    threads = set_threads(config.get("output", "threads"))
    t0 = time.perf_counter()
    runner = _run_hym if config.mode == "hym" else _run_ym
    summary, recs = runner(config, out_dir, checkpoint)
    summary.update({
        "preset": config.get("experiment", "preset"),
        "mode": config.mode,
        "seed": config.get("initial", "seed"),
        "threads": threads,
        "config_digest": config_digest(config),
        "version": __version__,
        "resumed_from_step": checkpoint.step if checkpoint else None,
        "csv": config.get("output", "csv"),
        "records": len(recs),
        "wall_time_s": time.perf_counter() - t0,
    })
    summary["figures"] = _finish_figures(config, recs, out_dir)
    write_summary(out_dir / config.get("output", "summary"), summary)
    (out_dir / "config.ini").write_text(config.to_text(), encoding="utf-8")
    return summary


def resume_experiment(checkpoint_path, out_dir=None, overrides: dict | None = None) -> dict:
    """Continue from a checkpoint with the configuration stored inside it.

    When ``out_dir`` already holds the run's CSV, rows from the checkpoint's
    step onward are replaced, so a finished resume leaves the same file a
    single uninterrupted run would have written.
    """
    ck = load_checkpoint(checkpoint_path)
    config = parse_config(ck.config_text, f"{checkpoint_path}:config")
    if overrides:
        config = config.replace(**overrides)
    geom, twist = config.lattice()
    if ck.geometry != geom:
        raise ConfigError("checkpoint lattice does not match its stored configuration")
    out_dir = Path(out_dir) if out_dir is not None else Path(checkpoint_path).parent
    return run_experiment(config, out_dir, ck)


# -- gradient check -------------------------------------------------------------------

def directional_derivative(A: ConnectionField, B: ConnectionField,
                           h: float = 1e-2) -> tuple[float, float]:
    """d/ds E(A + sB) at s = 0 by the five-point stencil, plus the energy scale seen.

    The discrete energy is a quartic polynomial in s, for which this stencil
    is exact, so only roundoff separates it from the true derivative.
    """
    def E(s):
        return energy(curvature(A.with_data(A.data + s * B.data)))

    return (E(-2 * h) - 8 * E(-h) + 8 * E(h) - E(2 * h)) / (12 * h), max(
        E(-2 * h), E(2 * h))


def gradcheck(geom, twist: TwistCocycle, pairs: int, seed: int = 0,
              gradient: Callable[[ConnectionField], ConnectionField] = ym_gradient,
              amplitude: float = 1.0, h: float = 1e-2) -> list[dict]:
    """Compare 2 <gradient(A), B> with the directional derivative of the energy.

    The first case is the zero (background) connection; the rest use random
    A and B drawn from ``seed``.  The error is relative to the larger of the
    two sides, floored at 1e-8 times the energy scale over ``h``.
    """
    rows = []
    rng = np.random.default_rng(seed)
    for k in range(pairs + 1):
        amp = 0.0 if k == 0 else amplitude
        A = random_connection(geom, twist, amp, int(rng.integers(2**31)))
        B = A.with_data(lie.random_algebra(rng, geom.sizes + (geom.n,), twist.rank,
                                           twist.complex_kind, 1.0))
        fd, scale = directional_derivative(A, B, h)
        an = 2.0 * l2_inner(gradient(A), B)
        denom = max(abs(fd), abs(an), 1e-8 * scale / h)
        rows.append({"case": k, "kind": "zero" if k == 0 else "random", "rank": twist.rank,
                     "fd": fd, "analytic": an, "rel_error": abs(fd - an) / denom})
    return rows


def default_gradcheck_setups(pairs: int = 50):
    """The built-in battery: ranks 1 and 2 on the 4^3 unit torus, half each."""
    out = []
    for rank in (1, 2):
        geom, twist = build_torus(3, (4, 4, 4), 0.25, TwistCocycle.untwisted(3, rank))
        out.append((geom, twist, pairs // 2))
    return out


# -- refinement study -----------------------------------------------------------------

def _interp(records: list[dict], key: str, t: float) -> float:
    ts = np.array([r["t"] for r in records])
    vs = np.array([r[key] for r in records])
    return float(np.interp(t, ts, vs))


def refinement_verdict(values, stable_tol: float = 0.05, floor: float = 1e-8) -> str:
    v = np.asarray(values, dtype=float)
    if v.max() < floor or v.max() <= (1 + stable_tol) * v.min():
        return "stable"
    d = np.diff(v)
    if np.all(d > 0):
        return "increasing"
    if np.all(d < 0):
        return "decreasing"
    return "mixed"


def refine_study(config: RunConfig, levels: list[int], out_dir,
                 fractions=(0.25, 0.5, 0.75, 1.0)) -> dict:
    """Rerun one continuum setup on successively finer lattices.

    The torus side lengths stay fixed, so level N uses spacing L / N.  sup|F|
    and the concentration profile are interpolated to matched flow times
    ``fraction * t_star``, where t_star is the shortest final time reached.
    """
    if config.mode != "ym":
        raise ConfigError("refine-study supports mode = ym only")
    if len(levels) < 2:
        raise ConfigError("refine-study needs at least two levels")
    sizes = config.sizes()
    if len(set(sizes)) != 1:
        raise ConfigError("refine-study needs equal sizes on every axis")
    length = sizes[0] * config.spacing()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    for N in levels:
        cfg = config.replace(geometry={"sizes": (int(N),), "spacing": length / N},
                             output={"checkpoint_every": 0})
        sub = out_dir / f"N{N}"
        summary = run_experiment(cfg, sub)
        _, recs = read_csv(sub / cfg.get("output", "csv"))
        runs.append({"N": int(N), "spacing": length / N, "summary": summary, "records": recs})
    t_star = min(r["records"][-1]["t"] for r in runs)
    radii = config.monitor_config().radii
    rows, verdicts = [], {}
    for frac in fractions:
        t = frac * t_star
        sup = []
        for run in runs:
            row = {"N": run["N"], "spacing": run["spacing"], "t": t,
                   "sup_F": _interp(run["records"], "sup_F", t)}
            for r in radii:
                row[conc_key(r)] = _interp(run["records"], conc_key(r), t)
            rows.append(row)
            sup.append(row["sup_F"])
        verdicts[f"{t:.6g}"] = refinement_verdict(sup)
    write_csv(out_dir / "refine.csv", rows)
    final = [row["sup_F"] for row in rows if row["t"] == fractions[-1] * t_star]
    report = {
        "levels": [r["N"] for r in runs],
        "t_star": t_star,
        "verdicts": verdicts,
        "verdict": verdicts[f"{fractions[-1] * t_star:.6g}"],
        "sup_F_ratio": final[-1] / final[0] if final[0] > 0 else float("inf"),
        "detector": {str(r["N"]): r["summary"]["detector"] for r in runs},
        "outcome": {str(r["N"]): r["summary"]["outcome"] for r in runs},
    }
    if config.get("output", "figures"):
        from .plotting import plot_refinement
        plot_refinement(runs, out_dir / "refine.png")
    write_summary(out_dir / "refine.json", report)
    return report

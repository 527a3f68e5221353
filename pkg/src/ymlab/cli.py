"""Command-line interface: ``ymlab {run,gradcheck,refine-study,resume,presets}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, preset_names, preset_text, resolve, schema_text
from .io import CheckpointError, write_csv
from .runner import (default_gradcheck_setups, gradcheck, refine_study, resume_experiment,
                     run_experiment, set_threads)

log = logging.getLogger("ymlab")

GRADCHECK_TOL = 1e-5


def _overrides(args) -> dict:
    out: dict = {}
    if getattr(args, "seed_override", None) is not None:
        out.setdefault("initial", {})["seed"] = args.seed_override
    if getattr(args, "cadence", None) is not None:
        out.setdefault("output", {})["cadence"] = args.cadence
    if getattr(args, "threads", None) is not None:
        out.setdefault("output", {})["threads"] = args.threads
    return out


def _load(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required (a file path or a preset name)")
    config = resolve(args.config)
    ov = _overrides(args)
    return config.replace(**ov) if ov else config


def _out_dir(args, config: RunConfig | None = None) -> Path:
    if args.out_dir:
        return Path(args.out_dir)
    name = config.get("experiment", "preset") if config is not None else "run"
    return Path("runs") / name


def _print_summary(summary: dict, keys) -> None:
    for k in keys:
        if k in summary:
            print(f"{k:>28}: {summary[k]}")


def cmd_run(args) -> int:
    config = _load(args)
    out = _out_dir(args, config)
    summary = run_experiment(config, out)
    _print_summary(summary, ("preset", "outcome", "verdict", "detector", "energy_initial",
                             "energy_final", "t_final", "steps", "epsreg_violations",
                             "det_h_drift_max", "trace_identity_residual_max"))
    print(f"{'output':>28}: {out}")
    return 0


def cmd_resume(args) -> int:
    ov = _overrides(args)
    ov.pop("initial", None)  # the seed only matters for initial data
    summary = resume_experiment(args.checkpoint, args.out_dir, ov or None)
    _print_summary(summary, ("preset", "resumed_from_step", "outcome", "verdict", "detector",
                             "energy_final", "t_final", "steps"))
    return 0


def cmd_gradcheck(args) -> int:
    if args.config:
        config = _load(args)
        if config.mode != "ym":
            raise ConfigError("gradcheck needs mode = ym")
        set_threads(config.get("output", "threads"))
        geom, twist = config.lattice()
        setups = [(geom, twist, args.pairs)]
        seed = config.get("initial", "seed")
    else:
        set_threads(args.threads or 1)
        setups = default_gradcheck_setups(args.pairs)
        seed = args.seed_override or 0
    rows = []
    for i, (geom, twist, pairs) in enumerate(setups):
        for row in gradcheck(geom, twist, pairs, seed=seed + i):
            row["sizes"] = "x".join(map(str, geom.sizes))
            rows.append(row)
    worst = max(r["rel_error"] for r in rows)
    failed = [r for r in rows if r["rel_error"] > GRADCHECK_TOL]
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "gradcheck.csv", [{k: v for k, v in r.items() if k not in ("kind", "sizes")}
                                          for r in rows])
    print(f"gradcheck: {len(rows)} cases, max relative error {worst:.3e} "
          f"(tolerance {GRADCHECK_TOL:g}): {'FAIL' if failed else 'pass'}")
    for r in failed[:10]:
        print(f"  case {r['case']} rank {r['rank']}: fd {r['fd']:.6e} vs {r['analytic']:.6e}")
    return 1 if failed else 0


def cmd_refine(args) -> int:
    config = _load(args)
    levels = [int(v) for v in args.levels.split(",") if v.strip()]
    out = _out_dir(args, config)
    report = refine_study(config, levels, out)
    print(f"levels {report['levels']}, t* = {report['t_star']:.6g}")
    for t, v in report["verdicts"].items():
        print(f"  t = {t}: sup|F| {v}")
    print(f"sup|F| ratio finest/coarsest at t*: {report['sup_F_ratio']:.4g}")
    print(f"detector: {json.dumps(report['detector'])}")
    print(f"output: {out}")
    return 0


def cmd_presets(args) -> int:
    if args.schema:
        print(schema_text())
        return 0
    if args.show:
        print(preset_text(args.show), end="")
        return 0
    for name in preset_names():
        first = preset_text(name).splitlines()[0].lstrip("# ")
        print(f"{name:<18} {first}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ymlab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="config file or preset name")
        sp.add_argument("--out-dir", help="output directory (default runs/<preset>)")
        sp.add_argument("--threads", type=int, help="numba threads")
        sp.add_argument("--seed-override", type=int, help="replace [initial] seed")
        sp.add_argument("--cadence", type=int, help="replace [output] cadence")

    sp = sub.add_parser("run", help="run one experiment")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("gradcheck", help="directional-derivative test of the gradient")
    common(sp)
    sp.add_argument("--pairs", type=int, default=50, help="random (A, B) pairs")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("refine-study", help="repeat a run on finer lattices")
    common(sp)
    sp.add_argument("--levels", required=True, help="comma-separated sites per axis, e.g. 8,12")
    sp.set_defaults(func=cmd_refine)

    sp = sub.add_parser("resume", help="continue a run from a checkpoint")
    sp.add_argument("checkpoint")
    common(sp, config=False)
    sp.set_defaults(func=cmd_resume)

    sp = sub.add_parser("presets", help="list built-in presets")
    sp.add_argument("--show", metavar="NAME", help="print a preset's config text")
    sp.add_argument("--schema", action="store_true", help="print every config key and default")
    sp.set_defaults(func=cmd_presets)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

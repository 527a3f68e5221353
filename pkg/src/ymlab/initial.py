"""Initial data built from a run configuration."""
from __future__ import annotations

from scipy.optimize import brentq

from .calculus import curvature
from .flow import energy
from .hym import (HermitianMetricField, HolomorphicStructure, identity_metric,
                  random_smooth_metric)
from .lattice import (ConnectionField, LatticeGeometry, TwistCocycle,
                      concentrated_bump_connection, random_connection, zeros_connection)


def bump_with_energy(geom: LatticeGeometry, twist: TwistCocycle, scale: float, target: float,
                     seed: int = 0, min_sites: float = 4.0) -> ConnectionField:
    """Bump connection whose amplitude is tuned so the total energy equals ``target``.

    Energy grows monotonically with the amplitude from zero, so the root is
    bracketed by doubling and then located with Brent's method.
    """
    if target <= 0:
        raise ValueError("target energy must be positive")

    def build(amp):
        return concentrated_bump_connection(geom, twist, scale, seed=seed, amplitude=amp,
                                            min_sites=min_sites)

    def gap(amp):
        return energy(curvature(build(amp))) - target

    hi = 1.0
    while gap(hi) < 0:
        hi *= 2.0
        if hi > 1e6:
            raise ValueError("could not bracket the target energy")
    amp = brentq(gap, 0.0, hi, xtol=1e-14, rtol=1e-13)
    return build(amp)


def initial_connection(config) -> ConnectionField:
    geom, twist = config.lattice()
    init = config["initial"]
    kind = init["kind"]
    if kind == "zero":
        return zeros_connection(geom, twist)
    if kind == "random":
        return random_connection(geom, twist, init["amplitude"], init["seed"])
    if kind == "bump":
        if init["energy"] is not None:
            return bump_with_energy(geom, twist, init["scale"], init["energy"],
                                    seed=init["seed"], min_sites=init["min_sites"])
        return concentrated_bump_connection(geom, twist, init["scale"], seed=init["seed"],
                                            amplitude=init["amplitude"] or 1.0,
                                            min_sites=init["min_sites"])
    if kind == "file":
        from .io import load_checkpoint
        ck = load_checkpoint(init["path"])
        if ck.kind != "connection":
            raise ValueError(f"{init['path']} holds a {ck.kind}, not a connection")
        if ck.geometry != geom or ck.twist.rank != twist.rank:
            raise ValueError(f"{init['path']} does not match the configured lattice")
        return ConnectionField(geom, twist, ck.fields[0])
    raise ValueError(f"initial kind {kind!r} does not define a connection")


def initial_metric(config) -> tuple[HermitianMetricField, HolomorphicStructure]:
    cgeom = config.complex_geometry()
    twist = config.twist()
    hol = HolomorphicStructure.standard(cgeom, twist)
    init = config["initial"]
    kind = init["kind"]
    if kind == "identity":
        H = identity_metric(cgeom, twist.rank)
    elif kind == "random":
        H = random_smooth_metric(cgeom, twist, init["amplitude"], modes=init["modes"],
                                 seed=init["seed"])
    elif kind == "file":
        from .io import load_checkpoint
        ck = load_checkpoint(init["path"])
        if ck.kind != "metric":
            raise ValueError(f"{init['path']} holds a {ck.kind}, not a metric")
        H = HermitianMetricField(cgeom, ck.fields[0])
    else:
        raise ValueError(f"initial kind {kind!r} does not define a metric")
    return H, hol

"""Diagnostics along a flow: concentration, epsilon-regularity, harmonic deviation, gap tests.

Ball sums use the flat-torus metric with the center-in-ball rule: a site
belongs to ``B_r(x)`` when its minimal-image distance to ``x`` is at most
``r``.  The sums are plain additions of non-negative numbers in a fixed
order, so they are deterministic and exactly monotone under pointwise
domination of the density.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from math import isqrt

import numpy as np

from . import lie
from .calculus import UnsupportedKindError, chern_integral
from .flow import energy, evaluate
from .lattice import ConnectionField, LatticeGeometry, TwistCocycle, TwoFormField, axis_pairs

VERDICTS = ("flat", "projectively-flat", "yang-mills", "non-critical")
OUTCOMES = ("converged", "concentrating", "stiff-stop", "undecided")


class CoverageError(ValueError):
    """The archive does not span the requested parabolic window."""


@dataclass(frozen=True)
class MonitorConfig:
    eps0: float = 0.02
    delta0: float = 0.1
    sigma1: float | None = None  # defaults to eps0 / 2
    radii: tuple[float, ...] = ()
    cadence: int = 1
    persistence: int = 10
    # minimum of sup|F|^2 / (16 (delta0 r_min)^-4) for a concentrating verdict
    sup_fraction: float = 1e-3
    gtol: float = 1e-10
    flat_tol: float = 1e-6
    epsreg_centers: int = 4
    epsreg_every: int = 10  # register a sample time t0 every k-th observation
    stop_on_concentration: bool = False

    def __post_init__(self):
        if not 0 < self.delta0 < 0.25:
            raise ValueError("delta0 must lie in (0, 1/4)")
        if self.eps0 <= 0:
            raise ValueError("eps0 must be positive")
        if self.sigma1 is None:
            object.__setattr__(self, "sigma1", self.eps0 / 2)
        object.__setattr__(self, "radii", tuple(sorted(float(r) for r in self.radii)))
        if any(r <= 0 for r in self.radii):
            raise ValueError("radii must be positive")
        if self.cadence < 1 or self.persistence < 1:
            raise ValueError("cadence and persistence must be >= 1")

    def check_radii(self, geometry: LatticeGeometry) -> None:
        too_big = [r for r in self.radii if r > geometry.injectivity_radius * (1 + 1e-12)]
        if too_big:
            raise ValueError(f"radii {too_big} exceed i_M = {geometry.injectivity_radius}")


# -- pointwise quantities -------------------------------------------------------------

def curvature_density(F: TwoFormField) -> np.ndarray:
    """|F|^2(x) summed over mu < nu."""
    return F.pointwise_norm2()


def sup_curvature(F: TwoFormField) -> float:
    return float(np.sqrt(np.max(curvature_density(F))))


def tracefree_density(F: TwoFormField) -> np.ndarray:
    return lie.norm2(lie.trace_free_part(F.data)).sum(axis=-1)


def tracefree_l2(F: TwoFormField) -> float:
    return float(np.sqrt(F.geometry.cell_volume * np.sum(tracefree_density(F))))


# -- ball sums ------------------------------------------------------------------------

def _offsets(size: int, w: int) -> range:
    """Distinct minimal-image offsets with |d| <= w along an axis of ``size`` sites."""
    lo = max(-w, -((size - 1) // 2))
    hi = min(w, size // 2)
    return range(lo, hi + 1)


def _bound(radius: float, spacing: float) -> int:
    return int(np.floor((radius / spacing) ** 2 + 1e-9))


def ball_sums(density: np.ndarray, geometry: LatticeGeometry, radius: float) -> np.ndarray:
    """Sum of ``density`` over B_radius(x) for every site x (no volume factor)."""
    n = geometry.n
    cache: dict[tuple[int, int], np.ndarray] = {}

    def rec(axis: int, bound: int) -> np.ndarray:
        if axis == n:
            return density
        key = (axis, bound)
        if key not in cache:
            out = None
            for d in _offsets(geometry.sizes[axis], isqrt(bound)):
                term = np.roll(rec(axis + 1, bound - d * d), -d, axis=axis)
                out = term.copy() if out is None else out + term
            cache[key] = out
        return cache[key]

    out = rec(0, _bound(radius, geometry.spacing))
    # rec refers to itself through its closure, so drop the partial sums now
    # rather than waiting for the cycle collector
    cache.clear()
    return out


def ball_count(geometry: LatticeGeometry, radius: float) -> int:
    """Number of lattice sites in a ball of the given radius."""
    one = np.zeros(geometry.sizes)
    one[(0,) * geometry.n] = 1.0
    return int(round(ball_sums(one, geometry, radius).sum()))


def _ball_mask(geometry: LatticeGeometry, center_site, radius: float) -> np.ndarray:
    center = geometry.spacing * np.asarray(center_site, dtype=float)
    return geometry.distance(center) <= radius * (1 + 1e-12) + 1e-12 * geometry.spacing


def concentration_profile(F: TwoFormField, radii) -> list[tuple[float, float]]:
    """(r, max over centers of r^(4-n) * integral of |F|^2 over B_r) for each radius."""
    geom = F.geometry
    dens = curvature_density(F)
    out = []
    for r in radii:
        if r > geom.injectivity_radius * (1 + 1e-12):
            raise ValueError(f"radius {r} exceeds i_M = {geom.injectivity_radius}")
        best = float(np.max(ball_sums(dens, geom, r)))
        out.append((float(r), r ** (4 - geom.n) * geom.cell_volume * best))
    return out


# -- parabolic windows ----------------------------------------------------------------

class TrajectoryArchive:
    """Time-ordered |F|^2 snapshots covering a sliding window of flow time."""

    def __init__(self, geometry: LatticeGeometry, horizon: float = np.inf):
        self.geometry = geometry
        self.horizon = horizon
        self._items: deque[tuple[float, np.ndarray]] = deque()

    def __len__(self) -> int:
        return len(self._items)

    @property
    def times(self) -> list[float]:
        return [t for t, _ in self._items]

    @property
    def span(self) -> tuple[float, float]:
        if not self._items:
            return (np.nan, np.nan)
        return (self._items[0][0], self._items[-1][0])

    def add(self, t: float, density: np.ndarray) -> None:
        if self._items and t <= self._items[-1][0]:
            raise ValueError("archive times must increase")
        self._items.append((float(t), np.asarray(density, dtype=float)))
        while len(self._items) > 2 and self._items[1][0] <= t - self.horizon:
            self._items.popleft()

    def discard_before(self, t_cut: float) -> None:
        """Drop snapshots not needed to interpolate at times >= t_cut."""
        while len(self._items) > 1 and self._items[1][0] <= t_cut:
            self._items.popleft()

    def add_field(self, t: float, F: TwoFormField) -> None:
        self.add(t, curvature_density(F))

    def covers(self, t0: float, half: float) -> bool:
        lo, hi = self.span
        tol = 1e-12 * max(1.0, abs(t0))
        return bool(self._items) and lo <= t0 - half + tol and t0 + half <= hi + tol

    def window(self, t0: float, half: float) -> list[tuple[float, np.ndarray]]:
        """Samples in [t0 - half, t0 + half] with linearly interpolated endpoints."""
        if not self.covers(t0, half):
            raise CoverageError(
                f"archive spans {self.span}, need [{t0 - half}, {t0 + half}]")
        lo, hi = t0 - half, t0 + half
        items = list(self._items)
        times = np.array([t for t, _ in items])

        def at(t):
            j = int(np.searchsorted(times, t))
            if j < len(times) and times[j] == t:
                return items[j][1]
            j = min(max(j, 1), len(times) - 1)
            (t1, d1), (t2, d2) = items[j - 1], items[j]
            w = (t - t1) / (t2 - t1)
            return (1 - w) * d1 + w * d2

        inner = [(t, d) for t, d in items if lo < t < hi]
        return [(lo, at(lo))] + inner + [(hi, at(hi))]


def _trapezoid(ts, values) -> float:
    ts = np.asarray(ts, dtype=float)
    vals = np.asarray(values, dtype=float)
    if len(ts) < 2:
        return 0.0
    return float(np.sum(0.5 * (vals[1:] + vals[:-1]) * np.diff(ts)))


def _check_parabolic_radius(geometry: LatticeGeometry, t0: float, R: float) -> None:
    if not 0 < R <= min(geometry.injectivity_radius, np.sqrt(max(t0, 0.0)) / 2) * (1 + 1e-12):
        raise ValueError(f"need 0 < R <= min(i_M, sqrt(t0)/2); got R={R}, t0={t0}")


def local_parabolic_energy(archive: TrajectoryArchive, x0, t0: float, R: float,
                           check_radius: bool = True) -> float:
    """R^(2-n) times the space-time integral of |F|^2 over B_R(x0) x [t0 - R^2, t0 + R^2].

    ``x0`` is a lattice site (integer index tuple).  Time integration is the
    trapezoid rule over the archived samples.
    """
    geom = archive.geometry
    if check_radius:
        _check_parabolic_radius(geom, t0, R)
    mask = _ball_mask(geom, x0, R)
    samples = archive.window(t0, R * R)
    ts = [t for t, _ in samples]
    vals = [geom.cell_volume * float(np.sum(d[mask])) for _, d in samples]
    return R ** (2 - geom.n) * _trapezoid(ts, vals)


@dataclass(frozen=True)
class EpsRegReport:
    x0: tuple[int, ...]
    t0: float
    R: float
    delta: float
    premise_value: float
    premise: bool
    sup_value: float  # sup of |F|^2 over the smaller parabolic cylinder
    bound: float
    conclusion: bool

    @property
    def margin(self) -> float:
        return self.bound - self.sup_value

    @property
    def violation(self) -> bool:
        return self.premise and not self.conclusion


def epsilon_regularity_bound(delta: float, R: float) -> float:
    return 16.0 * (delta * R) ** -4


def epsilon_regularity_check(archive: TrajectoryArchive, x0, t0: float, R: float,
                             delta: float, config: MonitorConfig) -> EpsRegReport:
    """Evaluate premise and conclusion of the epsilon-regularity implication at one point."""
    if not 0 < delta < config.delta0:
        raise ValueError(f"delta must lie in (0, {config.delta0})")
    geom = archive.geometry
    premise_value = local_parabolic_energy(archive, x0, t0, R)
    small = delta * R
    mask = _ball_mask(geom, x0, small)
    sup = max(float(np.max(d[mask])) for _, d in archive.window(t0, small * small))
    bound = epsilon_regularity_bound(delta, R)
    return EpsRegReport(tuple(int(i) for i in x0), float(t0), float(R), float(delta),
                        premise_value, premise_value < config.eps0, sup, bound, sup <= bound)


# -- harmonic form and gap test -------------------------------------------------------

def harmonic_chern_form(geometry: LatticeGeometry, twist: TwistCocycle) -> np.ndarray:
    """Constant harmonic 2-form theta[mu, nu] = -2 pi c[mu, nu] / (L_mu L_nu) (antisymmetric)."""
    if not twist.complex_kind:
        raise UnsupportedKindError("the harmonic Chern form needs a complex bundle")
    L = geometry.lengths
    c = np.asarray(twist.chern, dtype=float)
    return -2.0 * np.pi * c / np.outer(L, L)


def _theta_model(F: TwoFormField, theta: np.ndarray) -> np.ndarray:
    """(i theta_{mu nu} / r) Id for every stored pair, broadcastable against F.data."""
    r = F.twist.rank
    vals = np.array([theta[mu, nu] for mu, nu in axis_pairs(F.geometry.n)])
    return (1j * vals / r)[:, None, None] * np.eye(r)


def harmonic_deviation(F: TwoFormField, theta: np.ndarray) -> float:
    """Integral of e(A, theta) = |F - (i theta / r) Id|^2."""
    if not F.twist.complex_kind:
        raise UnsupportedKindError("harmonic deviation needs a complex bundle")
    diff = F.data - _theta_model(F, theta)
    return float(F.geometry.cell_volume * np.sum(lie.norm2(diff)))


@dataclass(frozen=True)
class GapReport:
    is_critical: bool
    grad_inf: float
    total_l2: float
    tracefree_l2: float
    deviation_l2: float
    sup_F: float
    sup_tracefree: float
    verdict: str


def gap_test(A: ConnectionField, gtol: float = 1e-10, flat_tol: float = 1e-6) -> GapReport:
    """Criticality plus flatness / projective flatness of A."""
    F, G = evaluate(A)
    grad_inf = lie.sup_norm(G.data)
    critical = grad_inf < gtol
    sup_F = sup_curvature(F)
    sup_tf = float(np.sqrt(np.max(tracefree_density(F))))
    if F.twist.complex_kind:
        dev = np.sqrt(harmonic_deviation(F, harmonic_chern_form(F.geometry, F.twist)))
    else:
        dev = np.sqrt(energy(F))
    if not critical:
        verdict = "non-critical"
    elif sup_F < flat_tol:
        verdict = "flat"
    elif sup_tf < flat_tol:
        verdict = "projectively-flat"
    else:
        verdict = "yang-mills"
    return GapReport(critical, grad_inf, float(np.sqrt(energy(F))), tracefree_l2(F),
                     float(dev), sup_F, sup_tf, verdict)


# -- blow-up detector -----------------------------------------------------------------

def conc_key(r: float) -> str:
    return f"conc@{r:.6g}"


def curvature_ratio(sup_F: float, r_min: float, delta0: float) -> float:
    """sup|F|^2 relative to the epsilon-regularity bound at parabolic scale r_min."""
    return sup_F**2 / epsilon_regularity_bound(delta0, r_min)


def blow_up_detector(records: list[dict], config: MonitorConfig,
                     flow_outcome: str | None = None) -> str:
    """Classify a trajectory as converged, concentrating, stiff-stop or undecided.

    ``concentrating`` needs ``persistence`` consecutive records in which the
    scaled ball energy at the smallest radius is at least ``sigma1`` and
    :func:`curvature_ratio` is at least ``sup_fraction``.
    """
    if flow_outcome == "stiff-stop":
        return "stiff-stop"
    if flow_outcome == "converged" or (records and records[-1].get("grad_inf", np.inf) < config.gtol):
        return "converged"
    if config.radii:
        r_min = config.radii[0]
        run = 0
        for rec in records:
            hot = (rec.get(conc_key(r_min), 0.0) >= config.sigma1
                   and curvature_ratio(rec["sup_F"], r_min, config.delta0) >= config.sup_fraction)
            run = run + 1 if hot else 0
            if run >= config.persistence:
                return "concentrating"
    return "undecided"


# -- observer used by run_flow --------------------------------------------------------

@dataclass
class MonitorSuite:
    """Computes the monitor columns at each cadence point and samples epsilon-regularity.

    Epsilon-regularity is checked at every archived time ``t0`` once the
    window ``[t0 - R^2, t0 + R^2]`` has been filled, for each configured
    radius admissible at ``t0``, at the hottest site and a few fixed sites.
    """

    config: MonitorConfig
    geometry: LatticeGeometry
    twist: TwistCocycle
    epsreg: list[EpsRegReport] = field(default_factory=list)
    stop_reason: str | None = None
    _theta: np.ndarray | None = None
    _chern0: dict | None = None
    _archive: TrajectoryArchive | None = None
    _pending: deque = field(default_factory=deque)
    _hot: int = 0
    _seen: int = 0

    def __post_init__(self):
        self.config.check_radii(self.geometry)
        if self.twist.complex_kind:
            self._theta = harmonic_chern_form(self.geometry, self.twist)
        self._archive = TrajectoryArchive(self.geometry)
        rng = np.random.default_rng(0)
        self._sites = [tuple(int(rng.integers(s)) for s in self.geometry.sizes)
                       for _ in range(max(self.config.epsreg_centers - 1, 0))]

    @property
    def violations(self) -> list[EpsRegReport]:
        return [r for r in self.epsreg if r.violation]

    def observe(self, state, record: dict) -> dict:
        F = state.F
        cfg = self.config
        out: dict = {}
        if cfg.radii:
            for r, v in concentration_profile(F, cfg.radii):
                out[conc_key(r)] = v
        if self._theta is not None:
            out["e_theta"] = harmonic_deviation(F, self._theta)
            chern = {p: chern_integral(F, p) for p in axis_pairs(self.geometry.n)}
            if self._chern0 is None:
                self._chern0 = chern
            out["chern_drift"] = max(abs(chern[p] - self._chern0[p]) for p in chern)
        out["tracefree_l2"] = tracefree_l2(F)
        if cfg.radii:
            dens = curvature_density(F)
            self._archive.add(state.t, dens)
            radii = tuple(R for R in cfg.radii
                          if R <= min(self.geometry.injectivity_radius, np.sqrt(state.t) / 2))
            if radii and self._seen % cfg.epsreg_every == 0:
                hot_site = np.unravel_index(int(np.argmax(dens)), dens.shape)
                self._pending.append((state.t, hot_site, radii))
            self._sample_epsreg(state.t)
            self._trim_archive(state.t)
            self._seen += 1
            r_min = cfg.radii[0]
            hot = (out[conc_key(r_min)] >= cfg.sigma1
                   and curvature_ratio(record["sup_F"], r_min, cfg.delta0) >= cfg.sup_fraction)
            self._hot = self._hot + 1 if hot else 0
            if cfg.stop_on_concentration and self._hot >= cfg.persistence:
                self.stop_reason = "concentrating"
        return out

    def state_dict(self) -> dict:
        """Counters a resumed run needs to reproduce the monitor columns."""
        chern0 = None if self._chern0 is None else [[mu, nu, v] for (mu, nu), v in self._chern0.items()]
        return {"chern0": chern0, "hot": self._hot, "seen": self._seen}

    def load_state_dict(self, d: dict) -> None:
        if d.get("chern0") is not None:
            self._chern0 = {(int(mu), int(nu)): float(v) for mu, nu, v in d["chern0"]}
        self._hot = int(d.get("hot", 0))
        self._seen = int(d.get("seen", 0))

    def _trim_archive(self, t_now: float) -> None:
        # a sample (t0, R) needs t0 >= 4 R^2, so its window starts at or after
        # max(3 R^2, t_now - R^2); pending samples may reach further back
        r_min, r_max = self.config.radii[0], self.config.radii[-1]
        needed = max(3.0 * r_min**2, t_now - r_max**2)
        for t0, _, radii in self._pending:
            needed = min(needed, t0 - max(radii) ** 2)
        self._archive.discard_before(needed)

    def _sample_epsreg(self, t_now: float) -> None:
        delta = self.config.delta0 / 2
        keep = deque()
        for t0, hot_site, radii in self._pending:
            waiting = []
            for R in radii:
                if t0 + R * R > t_now:
                    waiting.append(R)
                elif self._archive.covers(t0, R * R):
                    for x0 in [hot_site] + self._sites:
                        self.epsreg.append(
                            epsilon_regularity_check(self._archive, x0, t0, R, delta, self.config))
            if waiting:
                keep.append((t0, hot_site, tuple(waiting)))
        self._pending = keep

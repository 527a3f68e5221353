"""Hermitian-Yang-Mills flow on flat complex tori of complex dimension 1 or 2.

Conventions
-----------
Real axes ``(2j, 2j+1)`` carry the complex coordinate ``z_j = x_{2j} + i x_{2j+1}``
and the Kaehler form is ``omega = sum_j dx_{2j} ^ dx_{2j+1}``, so
``i Lambda F = i sum_j F_{2j, 2j+1}``.

A holomorphic structure is ``dbar_E = dbar + sum_j a_j dzbar_j`` in the global
frame; ``a_j`` includes the (0,1) part of the background connection when the
bundle is twisted.  For a metric ``H`` the Chern connection has

    A_zbar_j = a_j,      A_z_j = (L_x - i L_y) / 2 - H^-1 a_j^dagger H,

with ``L_mu = logm(H(x - e_mu)^-1 H(x + e_mu)) / (2a)``, a second-order
centered version of ``H^-1 d_mu H``.  Its trace is exactly the centered
difference of ``log det H``, so the trace of the discrete curvature is a
fixed linear operator applied to ``log det H``.  That makes the trace
identity hold to roundoff and lets the conformal normalization be solved
exactly by FFT.

The flow ``H^-1 dH/dt = -2 K`` with ``K = i Lambda F_H - lambda Id`` is
integrated by Heun steps of the form
``H <- H^{1/2} expm(-2 dt S) H^{1/2}``, ``S`` the Hermitian part of
``H^{1/2} K H^{-1/2}``, which keeps ``H`` positive and changes
``log det H`` by exactly ``-2 dt Re tr K``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import lie
from .calculus import UnsupportedKindError, curvature_centered
from .flow import StiffnessStop
from .lattice import (ConnectionField, LatticeGeometry, TwistCocycle, TwoFormField,
                      axis_pairs, background_connection, build_torus, pair_index, shift)

log = logging.getLogger(__name__)


class MetricError(ValueError):
    """A metric is not Hermitian positive definite."""


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class ComplexTorusGeometry:
    m: int
    lattice: LatticeGeometry

    @classmethod
    def build(cls, m: int, sizes, spacing: float) -> "ComplexTorusGeometry":
        if m not in (1, 2):
            raise ValueError("complex dimension must be 1 or 2")
        return cls(m, LatticeGeometry(2 * m, tuple(sizes), spacing))

    @property
    def n(self) -> int:
        return 2 * self.m

    @property
    def spacing(self) -> float:
        return self.lattice.spacing

    @property
    def sizes(self) -> tuple[int, ...]:
        return self.lattice.sizes

    @property
    def kahler_volume(self) -> float:
        return self.lattice.volume

    def lambda_pairs(self) -> list[int]:
        idx = pair_index(self.n)
        return [idx[(2 * j, 2 * j + 1)] for j in range(self.m)]


def _dagger(m):
    return np.conj(np.swapaxes(m, -1, -2))


def _centered(f: np.ndarray, geom: LatticeGeometry, mu: int) -> np.ndarray:
    """Centered difference of a periodic scalar (or adjoint-invariant) field."""
    return (np.roll(f, -1, axis=mu) - np.roll(f, 1, axis=mu)) / (2 * geom.spacing)


@dataclass(eq=False)
class HolomorphicStructure:
    geometry: ComplexTorusGeometry
    twist: TwistCocycle
    a01: np.ndarray  # (*sizes, m, r, r)

    @classmethod
    def standard(cls, geometry: ComplexTorusGeometry, twist: TwistCocycle,
                 extra: np.ndarray | None = None) -> "HolomorphicStructure":
        """(0,1) part of the background connection, plus an optional periodic ``extra``."""
        if not twist.complex_kind:
            raise UnsupportedKindError("holomorphic structures need a complex bundle")
        geom, twist = build_torus(geometry.n, geometry.sizes, geometry.spacing, twist)
        bg = background_connection(geom, twist).data
        a01 = np.stack([0.5 * (bg[..., 2 * j, :, :] + 1j * bg[..., 2 * j + 1, :, :])
                        for j in range(geometry.m)], axis=-3)
        if extra is not None:
            a01 = a01 + extra
        hol = cls(geometry, twist, a01)
        if geometry.m == 2:
            res = hol.integrability_residual()
            if res > 1e-10:
                raise ValueError(f"(0,2) curvature {res:.3e} exceeds 1e-10; not integrable")
        return hol

    @property
    def rank(self) -> int:
        return self.twist.rank

    def integrability_residual(self) -> float:
        """sup |dbar a + a ^ a| (the (0,2) curvature); zero in complex dimension 1."""
        if self.geometry.m == 1:
            return 0.0
        geom = self.geometry.lattice
        # express dbar_E as a connection-shaped field to reuse twisted shifts
        A = np.zeros(geom.sizes + (geom.n, self.rank, self.rank), dtype=complex)
        for j in range(2):
            A[..., 2 * j, :, :] = self.a01[..., j, :, :]
            A[..., 2 * j + 1, :, :] = -1j * self.a01[..., j, :, :]
        conn = ConnectionField(geom, self.twist, A)
        F = curvature_centered(conn)
        # F_{zbar_1 zbar_2} from real components of a pure (0,1) connection
        c = {p: F.component(*p) for p in ((0, 2), (0, 3), (1, 2), (1, 3))}
        f02 = 0.25 * (c[(0, 2)] + 1j * c[(0, 3)] + 1j * c[(1, 2)] - c[(1, 3)])
        return float(np.max(np.abs(f02)))


@dataclass(eq=False)
class HermitianMetricField:
    geometry: ComplexTorusGeometry
    data: np.ndarray  # (*sizes, r, r)

    def validate(self, herm_tol: float = 1e-12) -> None:
        H = self.data
        scale = max(1.0, float(np.max(np.abs(H))))
        if np.max(np.abs(H - _dagger(H))) > herm_tol * scale:
            raise MetricError("metric is not Hermitian")
        if self.min_eig() <= 0:
            raise MetricError("metric is not positive definite")

    def min_eig(self) -> float:
        return float(np.min(np.linalg.eigvalsh(self.data)))

    def log_det(self) -> np.ndarray:
        return np.linalg.slogdet(self.data)[1]

    @property
    def rank(self) -> int:
        return self.data.shape[-1]


def identity_metric(geometry: ComplexTorusGeometry, rank: int) -> HermitianMetricField:
    return HermitianMetricField(
        geometry, np.broadcast_to(np.eye(rank, dtype=complex), geometry.sizes + (rank, rank)).copy())


def random_smooth_metric(geometry: ComplexTorusGeometry, twist: TwistCocycle, amplitude: float,
                         modes: int = 2, seed: int = 0) -> HermitianMetricField:
    """exp of a random band-limited Hermitian field.

    With nontrivial transition matrices the field must commute with every
    ``g_mu``; for clock/shift twists that forces it to be scalar, so only a
    random conformal factor is drawn there.
    """
    rng = np.random.default_rng(seed)
    r = twist.rank
    geom = geometry.lattice
    coords = [2 * np.pi * x / L for x, L in zip(geom.coordinates(), geom.lengths)]
    scalar = not np.allclose(twist.g, np.eye(r))
    X = np.zeros(geom.sizes + (r, r), dtype=complex)
    ks = np.array(np.meshgrid(*[np.arange(-modes, modes + 1)] * geom.n, indexing="ij")).reshape(geom.n, -1).T
    for k in ks:
        if not np.any(k):
            continue
        phase = np.exp(1j * sum(ki * c for ki, c in zip(k, coords)))
        weight = amplitude / (1.0 + float(k @ k))
        if scalar:
            c = weight * (rng.normal() + 1j * rng.normal()) * np.eye(r)
        else:
            c = weight * (rng.normal(size=(r, r)) + 1j * rng.normal(size=(r, r)))
        X += phase[..., None, None] * c
    X = 0.5 * (X + _dagger(X))
    return HermitianMetricField(geometry, lie.herm_func(X, np.exp))


def _sqrt_pair(H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w, v = np.linalg.eigh(H)
    if np.min(w) <= 0:
        raise MetricError("metric is not positive definite")
    s = np.sqrt(w)
    vd = _dagger(v)
    return (v * s[..., None, :]) @ vd, (v / s[..., None, :]) @ vd


def _log_ratio(Hm: np.ndarray, Hp: np.ndarray) -> np.ndarray:
    """Principal logm(Hm^-1 Hp), via the Hermitian similarity Hm^{-1/2} Hp Hm^{-1/2}."""
    s, si = _sqrt_pair(Hm)
    M = si @ Hp @ si
    M = 0.5 * (M + _dagger(M))
    return si @ lie.herm_func(M, np.log) @ s


def _h_dagger(X: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Adjoint with respect to H: H^-1 X^dagger H."""
    return np.linalg.solve(H, _dagger(X) @ H)


def chern_connection(H: HermitianMetricField, hol: HolomorphicStructure
                     ) -> tuple[ConnectionField, TwoFormField]:
    """Chern connection of (H, dbar_E) and its site-centered curvature."""
    geometry = H.geometry
    geom = geometry.lattice
    tw = hol.twist
    Hd = H.data
    _sqrt_pair(Hd)  # positivity check
    a = geom.spacing
    L = []
    for mu in range(geom.n):
        Hp = shift(Hd, geom, tw, mu, 1)
        Hm = shift(Hd, geom, tw, mu, -1)
        L.append(_log_ratio(Hm, Hp) / (2 * a))
    A = np.empty(geom.sizes + (geom.n, tw.rank, tw.rank), dtype=complex)
    for j in range(geometry.m):
        a_j = hol.a01[..., j, :, :]
        A_z = 0.5 * (L[2 * j] - 1j * L[2 * j + 1]) - _h_dagger(a_j, Hd)
        A[..., 2 * j, :, :] = A_z + a_j
        A[..., 2 * j + 1, :, :] = 1j * (A_z - a_j)
    conn = ConnectionField(geom, tw, A)
    return conn, curvature_centered(conn)


def slope_lambda(geometry: ComplexTorusGeometry, twist: TwistCocycle, rank: int | None = None) -> float:
    """2 pi deg(E) / (rank Vol), with deg from the declared flux through the (x_j, y_j) planes."""
    if not twist.complex_kind:
        raise UnsupportedKindError("slope needs a complex bundle")
    r = twist.rank if rank is None else rank
    L = geometry.lattice.lengths
    vol = geometry.kahler_volume
    deg = sum(twist.chern[2 * j, 2 * j + 1] * vol / (L[2 * j] * L[2 * j + 1])
              for j in range(geometry.m))
    return 2 * np.pi * float(deg) / (r * vol)


def i_lambda(F: TwoFormField, geometry: ComplexTorusGeometry) -> np.ndarray:
    return 1j * sum(F.data[..., k, :, :] for k in geometry.lambda_pairs())


def hym_operator(H: HermitianMetricField, hol: HolomorphicStructure, lam: float
                 ) -> tuple[TwoFormField, np.ndarray]:
    """(F_H, K) with K = i Lambda F_H - lambda Id."""
    _, F = chern_connection(H, hol)
    K = i_lambda(F, H.geometry) - lam * np.eye(hol.rank)
    return F, K


def tracefree_l2_h(F: TwoFormField, H: np.ndarray) -> float:
    """L2 norm of F_perp measured in the metric H: |X|^2_H = tr(X H^-1 X^dagger H)."""
    X = lie.trace_free_part(F.data)
    Hb = H[..., None, :, :]
    dens = np.einsum("...ij,...ji->...", X @ np.linalg.solve(Hb, _dagger(X)), Hb).real
    return float(np.sqrt(F.geometry.cell_volume * np.sum(dens)))


def curvature_l2_h(F: TwoFormField, H: np.ndarray) -> float:
    X = F.data
    Hb = H[..., None, :, :]
    dens = np.einsum("...ij,...ji->...", X @ np.linalg.solve(Hb, _dagger(X)), Hb).real
    return float(np.sqrt(F.geometry.cell_volume * np.sum(dens)))


# -- scalar operators used by the trace identities -----------------------------------

def ddbar(f: np.ndarray, geometry: ComplexTorusGeometry) -> np.ndarray:
    """dbar d f as a 2-form (pairs in axis_pairs order), built from centered differences.

    Computed as d(df^{1,0}) with the same operators the Chern curvature uses,
    so trF_H - trF_H0 = ddbar(log det h) holds to roundoff.
    """
    geom = geometry.lattice
    alpha = np.empty(geom.sizes + (geom.n,), dtype=complex)
    for j in range(geometry.m):
        dz = 0.5 * (_centered(f, geom, 2 * j) - 1j * _centered(f, geom, 2 * j + 1))
        alpha[..., 2 * j] = dz
        alpha[..., 2 * j + 1] = 1j * dz
    out = np.empty(geom.sizes + (len(axis_pairs(geom.n)),), dtype=complex)
    for k, (mu, nu) in enumerate(axis_pairs(geom.n)):
        out[..., k] = _centered(alpha[..., nu], geom, mu) - _centered(alpha[..., mu], geom, nu)
    return out


def _wide_laplacian_symbol(geom: LatticeGeometry) -> np.ndarray:
    ks = np.meshgrid(*[2 * np.pi * np.fft.fftfreq(N, d=geom.spacing) for N in geom.sizes],
                     indexing="ij")
    return -sum(np.sin(k * geom.spacing) ** 2 for k in ks) / geom.spacing**2


def solve_wide_poisson(rhs: np.ndarray, geom: LatticeGeometry) -> np.ndarray:
    """Zero-mean solution of sum_mu D0_mu^2 phi = rhs.

    D0^2 annihilates the 2^n modes with every k_mu in {0, pi/a}; the right
    side must have no component there.
    """
    sym = _wide_laplacian_symbol(geom)
    null = np.abs(sym) < 1e-12 / geom.spacing**2
    rh = np.fft.fftn(rhs)
    scale = max(1.0, float(np.max(np.abs(rh))))
    if np.max(np.abs(rh[null])) > 1e-8 * scale:
        raise SolverError("right-hand side has a component in the kernel of the Laplacian")
    out = np.zeros_like(rh)
    out[~null] = rh[~null] / sym[~null]
    return np.fft.ifftn(out).real


def conformal_normalize(K0: HermitianMetricField, hol: HolomorphicStructure,
                        tol: float = 1e-8) -> tuple[HermitianMetricField, np.ndarray]:
    """H0 = exp(phi) K0 with i Lambda tr F_H0 = r lambda.  Returns (H0, phi)."""
    geometry = K0.geometry
    r = hol.rank
    lam = slope_lambda(geometry, hol.twist)
    _, F = chern_connection(K0, hol)
    tr = np.real(np.trace(i_lambda(F, geometry), axis1=-2, axis2=-1))
    # i Lambda tr F(e^phi K) = i Lambda tr F(K) - (r/2) Laplacian phi
    phi = solve_wide_poisson((2.0 / r) * (tr - r * lam), geometry.lattice)
    phi -= phi.mean()
    H0 = HermitianMetricField(geometry, np.exp(phi)[..., None, None] * K0.data)
    _, F0 = chern_connection(H0, hol)
    res = float(np.max(np.abs(np.trace(i_lambda(F0, geometry), axis1=-2, axis2=-1) - r * lam)))
    if res > tol:
        raise SolverError(f"conformal normalization residual {res:.3e} exceeds {tol}")
    return H0, phi


# -- identities -------------------------------------------------------------------------

def relative_endomorphism(H: HermitianMetricField, H0: HermitianMetricField) -> np.ndarray:
    return np.linalg.solve(H0.data, H.data)


def trace_identity_residual(H: HermitianMetricField, H0: HermitianMetricField,
                            hol: HolomorphicStructure) -> float:
    """sup |tr F_H - tr F_H0 - ddbar log det h|."""
    _, F = chern_connection(H, hol)
    _, F0 = chern_connection(H0, hol)
    trF = np.trace(F.data, axis1=-2, axis2=-1)
    trF0 = np.trace(F0.data, axis1=-2, axis2=-1)
    logdet_h = H.log_det() - H0.log_det()
    return float(np.max(np.abs(trF - trF0 - ddbar(logdet_h, H.geometry))))


def _d_plus_conn(geometry, hol, X: np.ndarray, A: np.ndarray, mu: int) -> np.ndarray:
    """Centered covariant derivative of an adjoint field: D0_mu X + [A_mu, X]."""
    geom = geometry.lattice
    Xp = shift(X, geom, hol.twist, mu, 1)
    Xm = shift(X, geom, hol.twist, mu, -1)
    Am = A[..., mu, :, :]
    return (Xp - Xm) / (2 * geom.spacing) + Am @ X - X @ Am


def _beta(H, H0, hol):
    """h^-1 d_{H0} h as the (1,0) form (real components), plus D_H0 and D_H."""
    geometry = H.geometry
    h = relative_endomorphism(H, H0)
    hinv = np.linalg.inv(h)
    conn0, F0 = chern_connection(H0, hol)
    A0 = conn0.data
    beta = np.empty_like(A0)
    for j in range(geometry.m):
        dx = _d_plus_conn(geometry, hol, h, A0, 2 * j)
        dy = _d_plus_conn(geometry, hol, h, A0, 2 * j + 1)
        bz = hinv @ (0.5 * (dx - 1j * dy))
        beta[..., 2 * j, :, :] = bz
        beta[..., 2 * j + 1, :, :] = 1j * bz
    return beta, conn0, F0


def connection_identity_residual(H: HermitianMetricField, H0: HermitianMetricField,
                                 hol: HolomorphicStructure) -> float:
    """sup |(D_H - D_H0) - h^-1 d_H0 h|; second order in the spacing."""
    beta, conn0, _ = _beta(H, H0, hol)
    conn, _ = chern_connection(H, hol)
    return float(np.max(np.abs(conn.data - conn0.data - beta)))


def curvature_identity_residual(H: HermitianMetricField, H0: HermitianMetricField,
                                hol: HolomorphicStructure) -> float:
    """sup |(F_H - F_H0) - dbar_E(h^-1 d_H0 h)|; second order in the spacing."""
    geometry = H.geometry
    geom = geometry.lattice
    beta, conn0, F0 = _beta(H, H0, hol)
    _, F = chern_connection(H, hol)
    # dbar_E beta is the (1,1) part of D_H0 beta; beta is pure (1,0) so the
    # (2,0) part is dropped by using the (0,1) piece of D_H0 only
    A01 = np.zeros_like(conn0.data)
    for j in range(geometry.m):
        a_j = hol.a01[..., j, :, :]
        A01[..., 2 * j, :, :] = a_j
        A01[..., 2 * j + 1, :, :] = -1j * a_j
    out = np.empty_like(F.data)
    for k, (mu, nu) in enumerate(axis_pairs(geom.n)):
        out[..., k, :, :] = (_d_plus_conn(geometry, hol, beta[..., nu, :, :], A01, mu)
                             - _d_plus_conn(geometry, hol, beta[..., mu, :, :], A01, nu))
    # keep only the (1,1) components: project every pair through the complex basis
    out = _project_11(out, geometry)
    return float(np.max(np.abs(F.data - F0.data - out)))


def _project_11(T: np.ndarray, geometry: ComplexTorusGeometry) -> np.ndarray:
    """Project a real-component 2-form (pairs in axis_pairs order) to its (1,1) part."""
    n = geometry.n
    idx = pair_index(n)
    full = np.zeros(T.shape[:-3] + (n, n) + T.shape[-2:], dtype=complex)
    for (mu, nu), k in idx.items():
        full[..., mu, nu, :, :] = T[..., k, :, :]
        full[..., nu, mu, :, :] = -T[..., k, :, :]
    # change of basis dx_{2j} = (dz + dzbar)/2, dx_{2j+1} = (dz - dzbar)/(2i)
    P = np.zeros((n, n), dtype=complex)  # rows: real axis, cols: holomorphic (z_j) then anti (zbar_j)
    m = geometry.m
    for j in range(m):
        P[2 * j, j], P[2 * j, m + j] = 0.5, 0.5
        P[2 * j + 1, j], P[2 * j + 1, m + j] = -0.5j, 0.5j
    C = np.einsum("ap,bq,...abij->...pqij", P, P, full)
    mask = np.zeros((n, n))
    mask[:m, m:] = 1
    mask[m:, :m] = 1
    C = C * mask[:, :, None, None]
    Pinv = np.linalg.inv(P)
    back = np.einsum("pa,qb,...pqij->...abij", Pinv, Pinv, C)
    out = np.empty_like(T)
    for (mu, nu), k in idx.items():
        out[..., k, :, :] = back[..., mu, nu, :, :]
    return out


# -- the flow ---------------------------------------------------------------------------

def hym_stability_dt(geometry: ComplexTorusGeometry, factor: float = 0.9) -> float:
    """Explicit bound from the linearization d/dt log H = Laplacian log H (wide stencil)."""
    return factor * 2.0 * geometry.spacing**2 / geometry.n


@dataclass(frozen=True)
class HymConfig:
    dt_init: float = 1e-4
    dt_min: float = 1e-12
    dt_max: float | None = None  # None caps dt at hym_stability_dt
    safety: float = 0.9
    t_end: float = 1.0
    tolerance: float = 1e-6
    eig_floor: float = 1e-8
    max_steps: int = 1_000_000

    def __post_init__(self):
        if not 0 < self.dt_min <= self.dt_init:
            raise ValueError("need 0 < dt_min <= dt_init")
        if self.dt_max is not None and self.dt_max < self.dt_init:
            raise ValueError("need dt_init <= dt_max")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass(eq=False)
class HymState:
    t: float
    H: HermitianMetricField
    F: TwoFormField
    K: np.ndarray
    step: float
    lam: float
    accepted: int = 0
    rejected: int = 0

    @classmethod
    def initial(cls, H: HermitianMetricField, hol: HolomorphicStructure, dt: float,
                t: float = 0.0) -> "HymState":
        H.validate()
        lam = slope_lambda(H.geometry, hol.twist)
        F, K = hym_operator(H, hol, lam)
        return cls(t, H, F, K, dt, lam)


def _exp_update(H: np.ndarray, Kbar: np.ndarray, dt: float) -> np.ndarray:
    s, si = _sqrt_pair(H)
    S = s @ Kbar @ si
    S = 0.5 * (S + _dagger(S))
    out = s @ lie.herm_func(-2.0 * dt * S, np.exp) @ s
    return 0.5 * (out + _dagger(out))


def hym_step(state: HymState, hol: HolomorphicStructure, config: HymConfig) -> HymState:
    """One accepted Heun step of H^-1 dH/dt = -2 (i Lambda F_H - lambda Id)."""
    geometry = state.H.geometry
    dt_max = config.dt_max if config.dt_max is not None else hym_stability_dt(geometry)
    dt = min(state.step, dt_max, max(config.t_end - state.t, config.dt_min))
    rejected = 0
    H = state.H.data
    while True:
        H1 = HermitianMetricField(geometry, _exp_update(H, state.K, dt))
        ok = H1.min_eig() > config.eig_floor
        if ok:
            _, K2 = hym_operator(H1, hol, state.lam)
            err = 0.5 * dt * float(np.max(np.abs(K2 - state.K)))
            H_new = HermitianMetricField(geometry, _exp_update(H, 0.5 * (state.K + K2), dt))
            ok = err <= config.tolerance and H_new.min_eig() > config.eig_floor
        if ok:
            break
        rejected += 1
        dt *= 0.5
        if dt < config.dt_min:
            raise StiffnessStop(f"dt fell below dt_min={config.dt_min} at t={state.t}")
    factor = 2.0 if err == 0.0 else min(2.0, config.safety * (config.tolerance / err) ** (1 / 3))
    next_dt = min(dt_max, max(config.dt_min, dt * max(factor, 0.5)))
    F, K = hym_operator(H_new, hol, state.lam)
    return HymState(state.t + dt, H_new, F, K, next_dt, state.lam,
                    state.accepted + 1, state.rejected + rejected)


@dataclass
class HymOutcome:
    outcome: str  # t_end | converged | stiff-stop | max-steps
    state: HymState
    records: list[dict] = field(default_factory=list)
    steps: int = 0


def hym_record(state: HymState, H0: HermitianMetricField, hol: HolomorphicStructure) -> dict:
    det_h = np.exp(state.H.log_det() - H0.log_det())
    return {
        "t": state.t,
        "dt": state.step,
        "energy": curvature_l2_h(state.F, state.H.data) ** 2,
        "sup_K": float(np.max(np.abs(state.K))),
        "min_eig_H": state.H.min_eig(),
        "det_h_drift": float(np.max(np.abs(det_h - 1.0))),
        "trace_identity_residual": trace_identity_residual(state.H, H0, hol),
        "tracefree_l2": tracefree_l2_h(state.F, state.H.data),
        "lambda": state.lam,
    }


def run_hym(state: HymState, hol: HolomorphicStructure, config: HymConfig, cadence: int = 1,
            H0: HermitianMetricField | None = None, ktol: float = 1e-10,
            on_step=None, start_step: int = 0, on_record=None) -> HymOutcome:
    """Integrate the HYM flow to t_end (or until sup|K| < ktol).

    Callbacks behave as in :func:`ymlab.flow.run_flow`.
    """
    H0 = H0 if H0 is not None else state.H
    records: list[dict] = []
    step = start_step

    def emit(st):
        rec = hym_record(st, H0, hol)
        rec["step"] = step
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    if step % cadence == 0:
        emit(state)
    outcome = "t_end"
    while True:
        if float(np.max(np.abs(state.K))) < ktol:
            outcome = "converged"
            break
        if state.t >= config.t_end * (1 - 1e-12):
            break
        if step - start_step >= config.max_steps:
            outcome = "max-steps"
            break
        try:
            state = hym_step(state, hol, config)
        except StiffnessStop as exc:
            log.info("%s", exc)
            outcome = "stiff-stop"
            break
        step += 1
        if on_step is not None:
            on_step(step, state)
        if step % cadence == 0:
            emit(state)
    if not records or records[-1]["step"] != step:
        emit(state)
    return HymOutcome(outcome, state, records, step)


def metric_sqrt(H: HermitianMetricField, H0: HermitianMetricField) -> np.ndarray:
    """sigma = h^{1/2}, the H0-positive square root of h = H0^-1 H."""
    s0, s0i = _sqrt_pair(H0.data)
    M = s0i @ H.data @ s0i
    M = 0.5 * (M + _dagger(M))
    return s0i @ lie.herm_func(M, np.sqrt) @ s0


def ym_from_hym(trajectory, H0: HermitianMetricField, hol: HolomorphicStructure) -> list[dict]:
    """Conjugate each F_H(t) by sigma(t) = h(t)^{1/2}.

    ``trajectory`` is an iterable of (t, HermitianMetricField).  Each entry of
    the result holds the conjugated curvature, its H0-norm, the drift of
    tr F relative to t = 0 and the trace-free L2 norm.
    """
    out = []
    tr0 = None
    for t, H in trajectory:
        _, F = chern_connection(H, hol)
        sigma = metric_sqrt(H, H0)
        sig_inv = np.linalg.inv(sigma)[..., None, :, :]
        conj = sigma[..., None, :, :] @ F.data @ sig_inv
        Fc = TwoFormField(F.geometry, F.twist, conj)
        tr = np.trace(conj, axis1=-2, axis2=-1)
        if tr0 is None:
            tr0 = tr
        out.append({
            "t": t,
            "curvature": Fc,
            "norm_h0": curvature_l2_h(Fc, H0.data),
            "norm_h": curvature_l2_h(F, H.data),
            "trace_drift": float(np.max(np.abs(tr - tr0))),
            "tracefree_l2": tracefree_l2_h(Fc, H0.data),
        })
    return out

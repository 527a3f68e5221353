"""Periodic lattice geometry on flat tori with twisted (quasi-periodic) bundles.

Fields are numpy arrays whose leading ``n`` axes index lattice sites in C
order, followed by a direction (or axis-pair) axis and the ``r x r`` fiber
matrix; flattening in C order therefore gives the site-major,
direction-minor layout used by checkpoints.

A bundle is described in a global frame over the fundamental domain
``[0, L_0) x ... x [0, L_{n-1})``.  Crossing the face ``x_mu = L_mu`` acts on
sections by the transition map

    Omega_mu(x) = g_mu * exp(2 pi i sum_{nu > mu} c[mu, nu] x_nu / (r L_nu)),

with constant ``g_mu`` and integer flux ``c``.  The scalar phase drops out of
the adjoint action but leaves a constant central shift ``s_mu`` in the
connection, ``A(x + L_mu e_mu) = g_mu A(x) g_mu^-1 + s_mu``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import lie

MIN_SITES = 4


class TopologyError(ValueError):
    pass


class ResolutionError(ValueError):
    pass


def axis_pairs(n: int) -> list[tuple[int, int]]:
    return list(combinations(range(n), 2))


def pair_index(n: int) -> dict[tuple[int, int], int]:
    return {p: i for i, p in enumerate(axis_pairs(n))}


@dataclass(frozen=True)
class LatticeGeometry:
    n: int
    sizes: tuple[int, ...]
    spacing: float

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if not 2 <= self.n <= 5:
            raise ValueError(f"dimension must be in 2..5, got {self.n}")
        if len(self.sizes) != self.n:
            raise ValueError(f"expected {self.n} sizes, got {len(self.sizes)}")
        if min(self.sizes) < MIN_SITES:
            raise ValueError(f"every axis needs at least {MIN_SITES} sites: {self.sizes}")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")

    @property
    def lengths(self) -> np.ndarray:
        return self.spacing * np.asarray(self.sizes, dtype=float)

    @property
    def volume(self) -> float:
        return float(self.spacing**self.n * np.prod(self.sizes))

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.n

    @property
    def injectivity_radius(self) -> float:
        return self.spacing * min(self.sizes) / 2.0

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.sizes))

    def coordinates(self) -> list[np.ndarray]:
        """Broadcastable coordinate arrays x_mu = a * j_mu."""
        grids = []
        for mu, size in enumerate(self.sizes):
            shape = [1] * self.n
            shape[mu] = size
            grids.append((self.spacing * np.arange(size)).reshape(shape))
        return grids

    def displacement(self, center) -> list[np.ndarray]:
        """Minimal-image displacement x - center on the flat torus."""
        out = []
        for x, c, L in zip(self.coordinates(), center, self.lengths):
            out.append(np.mod(x - c + 0.5 * L, L) - 0.5 * L)
        return out

    def distance(self, center) -> np.ndarray:
        disp = self.displacement(center)
        return np.sqrt(sum(np.broadcast_to(d, self.sizes) ** 2 for d in disp))


@dataclass(frozen=True, eq=False)
class TwistCocycle:
    """Constant transition matrices ``g[mu]`` plus the integer flux ``chern[mu, nu]``."""

    rank: int
    complex_kind: bool
    g: np.ndarray
    chern: np.ndarray

    @classmethod
    def untwisted(cls, n: int, rank: int, complex_kind: bool = True) -> "TwistCocycle":
        dtype = complex if complex_kind else float
        g = np.broadcast_to(np.eye(rank, dtype=dtype), (n, rank, rank)).copy()
        return cls(rank, complex_kind, g, np.zeros((n, n), dtype=np.int64))

    @classmethod
    def from_pairs(cls, n: int, rank: int, chern: dict[tuple[int, int], int],
                   complex_kind: bool = True, g: np.ndarray | None = None) -> "TwistCocycle":
        c = np.zeros((n, n), dtype=np.int64)
        for (mu, nu), k in chern.items():
            if mu == nu:
                raise TopologyError("flux needs two distinct axes")
            c[mu, nu] = k
            c[nu, mu] = -k
        if g is None:
            g = cls.untwisted(n, rank, complex_kind).g
        return cls(rank, complex_kind, np.asarray(g), c)

    @classmethod
    def thooft(cls, n: int, rank: int, chern: dict[tuple[int, int], int]) -> "TwistCocycle":
        """Clock/shift twists realizing a central flux in U(rank).

        Each flux-carrying pair must use axes no other pair uses.  The pair
        (mu, nu) with flux k gets g_mu = P^-k and g_nu = Q, so that
        g_mu g_nu g_mu^-1 g_nu^-1 = exp(-2 pi i k / r).
        """
        g = np.broadcast_to(np.eye(rank, dtype=complex), (n, rank, rank)).copy()
        used: set[int] = set()
        omega = np.exp(2j * np.pi / rank)
        clock = np.diag(omega ** np.arange(rank))
        shift_m = np.roll(np.eye(rank, dtype=complex), 1, axis=0)
        for (mu, nu), k in chern.items():
            if k % rank == 0:
                continue
            if mu in used or nu in used:
                raise TopologyError(f"axes of pair ({mu},{nu}) already carry a twist")
            used.update((mu, nu))
            g[mu] = np.linalg.matrix_power(np.conj(clock), k % rank)
            g[nu] = shift_m
        return cls.from_pairs(n, rank, chern, True, g)

    @property
    def is_flat_frame(self) -> bool:
        return not np.any(self.chern)

    def central_phase(self, mu: int, nu: int) -> complex:
        """Expected value of the commutator g_mu g_nu g_mu^-1 g_nu^-1."""
        return np.exp(-2j * np.pi * self.chern[mu, nu] / self.rank)

    def connection_shift(self, mu: int, lengths: np.ndarray) -> np.ndarray:
        """Central shift s_mu (one scalar per connection component nu)."""
        n = self.chern.shape[0]
        s = np.zeros(n, dtype=complex)
        for nu in range(mu + 1, n):
            s[nu] = -2j * np.pi * self.chern[mu, nu] / (self.rank * lengths[nu])
        return s


def build_torus(n: int, sizes, spacing: float,
                twist: TwistCocycle | None = None) -> tuple[LatticeGeometry, TwistCocycle]:
    """Validate a lattice and its bundle data; returns ``(geometry, twist)``."""
    geom = LatticeGeometry(n, tuple(sizes), float(spacing))
    if twist is None:
        twist = TwistCocycle.untwisted(n, 1)
    validate_twist(geom, twist)
    return geom, twist


def validate_twist(geom: LatticeGeometry, twist: TwistCocycle) -> None:
    r = twist.rank
    if not 1 <= r <= lie.MAX_RANK:
        raise ValueError(f"rank must be in 1..{lie.MAX_RANK}")
    g = twist.g
    if g.shape != (geom.n, r, r):
        raise TopologyError(f"twist matrices have shape {g.shape}, expected {(geom.n, r, r)}")
    c = twist.chern
    if c.shape != (geom.n, geom.n) or np.any(c != -c.T):
        raise TopologyError("declared Chern data must be an antisymmetric integer n x n array")
    if not twist.complex_kind:
        if np.iscomplexobj(g) and np.any(np.abs(g.imag) > 0):
            raise TopologyError("real bundles need real transition matrices")
        if np.any(c):
            raise TopologyError("real bundles carry no first Chern class")
    for mu in range(geom.n):
        if not lie.is_unitary(g[mu]):
            raise TopologyError(f"transition map g_{mu} is not unitary/orthogonal")
    for mu, nu in axis_pairs(geom.n):
        comm = g[mu] @ g[nu] @ lie.dagger(g[mu]) @ lie.dagger(g[nu])
        expected = twist.central_phase(mu, nu) * np.eye(r)
        if np.max(np.abs(comm - expected)) > 1e-10:
            raise TopologyError(
                f"cocycle inconsistent on axis pair ({mu},{nu}): twist commutator is not "
                f"the central element exp(-2 pi i c/r) with c = {c[mu, nu]}")


# -- shifts ------------------------------------------------------------------------

def _slab(n: int, mu: int, index: int, extra: int) -> tuple:
    sl = [slice(None)] * (n + extra)
    sl[mu] = index
    return tuple(sl)


def shift(data: np.ndarray, geom: LatticeGeometry, twist: TwistCocycle, mu: int,
          step: int, rep: str = "adjoint") -> np.ndarray:
    """Field values at ``x + step * a e_mu`` for every site, applying the twist at the wrap.

    ``rep`` is one of ``"adjoint"`` (values in End(E): curvature, gauge
    fields, metrics), ``"connection"`` (a full 1-form of shape
    ``(*sizes, n, r, r)``) or ``"fundamental"`` (sections of shape
    ``(*sizes, r)``).
    """
    n = geom.n
    if not 0 <= mu < n:
        raise IndexError(f"axis {mu} out of range for n={n}")
    if step not in (1, -1):
        raise ValueError("step must be +1 or -1")
    extra = data.ndim - n
    out = np.roll(data, -step, axis=mu)
    edge = geom.sizes[mu] - 1 if step == 1 else 0
    sl = _slab(n, mu, edge, extra)
    slab = out[sl]
    g = twist.g[mu]
    gi = lie.dagger(g)
    if rep == "fundamental":
        phase = _fundamental_phase(geom, twist, mu)[sl[:n]]
        if step == 1:
            out[sl] = phase[..., None] * (slab @ g.T)
        else:
            out[sl] = np.conj(phase)[..., None] * (slab @ np.conj(g))
        return out
    if rep == "connection":
        s = twist.connection_shift(mu, geom.lengths)
        if step == 1:
            new = g @ slab @ gi
            if np.any(s):
                new = new + s[:, None, None] * np.eye(twist.rank)
        else:
            if np.any(s):
                slab = slab - s[:, None, None] * np.eye(twist.rank)
            new = gi @ slab @ g
        out[sl] = new.astype(out.dtype, copy=False)
        return out
    if rep != "adjoint":
        raise ValueError(f"unknown representation {rep!r}")
    out[sl] = (g @ slab @ gi) if step == 1 else (gi @ slab @ g)
    return out


def _fundamental_phase(geom: LatticeGeometry, twist: TwistCocycle, mu: int) -> np.ndarray:
    phi = np.zeros(geom.sizes)
    coords = geom.coordinates()
    for nu in range(mu + 1, geom.n):
        if twist.chern[mu, nu]:
            phi = phi + 2 * np.pi * twist.chern[mu, nu] * coords[nu] / (twist.rank * geom.lengths[nu])
    return np.exp(1j * phi)


def shifted_value(field_data: np.ndarray, geom: LatticeGeometry, twist: TwistCocycle,
                  site: tuple[int, ...], mu: int, step: int, rep: str = "adjoint") -> np.ndarray:
    """Single-site version of :func:`shift`."""
    return shift(field_data, geom, twist, mu, step, rep)[tuple(site)]


# -- field containers ---------------------------------------------------------------

@dataclass(eq=False)
class ConnectionField:
    geometry: LatticeGeometry
    twist: TwistCocycle
    data: np.ndarray  # (*sizes, n, r, r)

    def copy(self) -> "ConnectionField":
        return ConnectionField(self.geometry, self.twist, self.data.copy())

    def with_data(self, data: np.ndarray) -> "ConnectionField":
        return ConnectionField(self.geometry, self.twist, data)

    @property
    def rank(self) -> int:
        return self.twist.rank


@dataclass(eq=False)
class TwoFormField:
    geometry: LatticeGeometry
    twist: TwistCocycle
    data: np.ndarray  # (*sizes, n(n-1)/2, r, r), pairs ordered as axis_pairs(n)

    def component(self, mu: int, nu: int) -> np.ndarray:
        if mu == nu:
            return np.zeros_like(self.data[..., 0, :, :])
        if mu < nu:
            return self.data[..., pair_index(self.geometry.n)[(mu, nu)], :, :]
        return -self.data[..., pair_index(self.geometry.n)[(nu, mu)], :, :]

    def pointwise_norm2(self) -> np.ndarray:
        """|F|^2(x) = sum over mu<nu of |F_{mu nu}(x)|^2."""
        return lie.norm2(self.data).sum(axis=-1)


@dataclass(eq=False)
class GaugeFieldU:
    geometry: LatticeGeometry
    twist: TwistCocycle
    data: np.ndarray  # (*sizes, r, r)


def zeros_connection(geom: LatticeGeometry, twist: TwistCocycle) -> ConnectionField:
    dtype = complex if twist.complex_kind else float
    return ConnectionField(geom, twist, np.zeros(geom.sizes + (geom.n, twist.rank, twist.rank), dtype))


def background_connection(geom: LatticeGeometry, twist: TwistCocycle) -> ConnectionField:
    """Constant-curvature central connection carrying the declared flux.

    A_nu(x) = -(2 pi i / r) sum_{mu < nu} c[mu, nu] x_mu / (L_mu L_nu) Id,
    whose curvature is F_{mu nu} = -2 pi i c[mu, nu] / (r L_mu L_nu) Id.
    It is the zero connection when no flux is declared.
    """
    A = zeros_connection(geom, twist)
    if twist.is_flat_frame:
        return A
    L = geom.lengths
    coords = geom.coordinates()
    eye = np.eye(twist.rank)
    for nu in range(geom.n):
        val = np.zeros(geom.sizes, dtype=complex)
        for mu in range(nu):
            if twist.chern[mu, nu]:
                val = val + (-2j * np.pi * twist.chern[mu, nu] / (twist.rank * L[mu] * L[nu])) * coords[mu]
        A.data[..., nu, :, :] = val[..., None, None] * eye
    return A


def random_connection(geom: LatticeGeometry, twist: TwistCocycle, amplitude: float,
                      seed: int) -> ConnectionField:
    """Background connection plus i.i.d. skew noise with entries of modulus <= amplitude."""
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    A = background_connection(geom, twist)
    if amplitude == 0:
        return A
    rng = np.random.default_rng(seed)
    noise = lie.random_algebra(rng, geom.sizes + (geom.n,), twist.rank,
                               twist.complex_kind, amplitude)
    A.data += noise
    return A


# -- concentrated initial data ------------------------------------------------------

# Self-dual 't Hooft symbols eta[a, mu, nu] for a = 1..3, mu, nu = 0..3.
_ETA = np.zeros((3, 4, 4))
for _a, (_i, _j) in enumerate(((1, 2), (2, 0), (0, 1))):
    _ETA[_a, _i, _j] = 1.0
    _ETA[_a, _j, _i] = -1.0
    _ETA[_a, _a, 3] = 1.0
    _ETA[_a, 3, _a] = -1.0
# i sigma_a / 2 spans su(2)
_SU2 = 0.5j * np.array([[[0, 1], [1, 0]], [[0, -1j], [1j, 0]], [[1, 0], [0, -1]]])


def smooth_cutoff(s: np.ndarray) -> np.ndarray:
    """C-infinity step: 1 for s <= 1, 0 for s >= 2."""
    s = np.asarray(s, dtype=float)
    u = np.clip(s - 1.0, 0.0, 1.0)

    def psi(t):
        return np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)

    return psi(1.0 - u) / (psi(1.0 - u) + psi(u))


def concentrated_bump_connection(geom: LatticeGeometry, twist: TwistCocycle, scale: float,
                                 center=None, seed: int = 0, amplitude: float = 1.0,
                                 min_sites: float = 4.0,
                                 max_fraction: float = 0.25) -> ConnectionField:
    """Instanton-like su(2) bump of size ``scale`` added to the background connection.

    In the first four axes around ``center``,

        A_mu(x) = f(|x|/scale) * 2 eta[a, mu, nu] x_nu / (|x|^2 + rho^2) * (i sigma_a / 2),

    with ``rho = scale / 2``, the self-dual 't Hooft symbols and the smooth
    cutoff ``f`` (1 inside the ball of radius ``scale``, 0 outside twice
    that).  Components along the remaining axes vanish, while ``|x|`` is the
    full n-dimensional distance so the support is the ball B_{2 scale}.  The
    core is the regular-gauge instanton; between radius ``scale`` and
    ``2 scale`` the cutoff unwinds it, which is where most of the
    curvature away from the core sits.  ``seed`` picks the su(2) orientation
    and ``amplitude`` multiplies the whole bump.

    ``scale`` must lie in ``[min_sites * a, max_fraction * i_M]``.
    """
    n, r = geom.n, twist.rank
    if n < 4 or r < 2:
        raise ValueError("the bump needs n >= 4 and rank >= 2")
    if not twist.complex_kind:
        raise ValueError("the bump is an su(2) block and needs a complex bundle")
    if not 0 < scale <= max_fraction * geom.injectivity_radius * (1 + 1e-12):
        raise ResolutionError(
            f"scale {scale} exceeds {max_fraction} i_M with i_M = {geom.injectivity_radius}")
    if scale < min_sites * geom.spacing * (1 - 1e-12):
        raise ResolutionError(f"scale {scale} is below {min_sites} lattice spacings")
    if center is None:
        center = 0.5 * geom.lengths
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    gens = np.einsum("ab,bij->aij", q, _SU2)

    disp = [np.broadcast_to(d, geom.sizes) for d in geom.displacement(center)]
    dist2 = sum(d**2 for d in disp)
    rho2 = (0.5 * scale) ** 2
    prof = smooth_cutoff(np.sqrt(dist2) / scale) * 2.0 / (dist2 + rho2)

    A = background_connection(geom, twist)
    block = np.zeros(geom.sizes + (4, 2, 2), dtype=complex)
    for mu in range(4):
        for nu in range(4):
            coeff = _ETA[:, mu, nu]
            if not np.any(coeff):
                continue
            mat = np.einsum("a,aij->ij", coeff, gens)
            block[..., mu, :, :] += (prof * disp[nu])[..., None, None] * mat
    A.data[..., :4, :2, :2] += amplitude * block
    return A

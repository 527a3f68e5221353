import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ymlab import lie
from ymlab.calculus import (GeometryMismatchError, UnsupportedKindError, bianchi_residual,
                            chern_integral, conjugate_twoform, curvature, curvature_reference,
                            gauge_act, l2_inner, ym_gradient, ym_gradient_reference)
from ymlab.flow import energy
from ymlab.lattice import (GaugeFieldU, TwistCocycle, TwoFormField, background_connection,
                           build_torus, random_connection, zeros_connection)


def _setup(n, N, rank, chern=None, complex_kind=True, thooft=False):
    if thooft:
        tw = TwistCocycle.thooft(n, rank, chern)
    elif chern:
        tw = TwistCocycle.from_pairs(n, rank, chern, complex_kind)
    else:
        tw = TwistCocycle.untwisted(n, rank, complex_kind)
    return build_torus(n, [N] * n, 1.0 / N, tw)


def trig_connection(N, n=3, rank=2, seed=0):
    """Smooth periodic connection sampled at link midpoints."""
    geom, tw = _setup(n, N, rank)
    rng = np.random.default_rng(seed)
    X = lie.random_algebra(rng, (n, 2), rank, True, 1.0)
    A = zeros_connection(geom, tw)
    xs = geom.coordinates()
    h = 0.5 / N
    for mu in range(n):
        phase = sum(2 * np.pi * (xs[nu] + (h if nu == mu else 0)) for nu in range(n))
        c = np.cos(2 * np.pi * (xs[0] + (h if mu == 0 else 0)))
        A.data[..., mu, :, :] = (np.sin(phase)[..., None, None] * X[mu, 0]
                                 + np.broadcast_to(c, geom.sizes)[..., None, None] * X[mu, 1])
    return A


def smooth_gauge(geom, tw, seed=1):
    rng = np.random.default_rng(seed)
    X, Y = lie.random_algebra(rng, (2,), tw.rank, True, 0.5)
    xs = geom.coordinates()
    s = np.broadcast_to(np.sin(2 * np.pi * xs[0]) + 0.5 * np.cos(2 * np.pi * xs[1]), geom.sizes)
    c = np.broadcast_to(np.cos(2 * np.pi * xs[-1]), geom.sizes)
    return GaugeFieldU(geom, tw, lie.exp_map(s[..., None, None] * X + c[..., None, None] * Y))


def constant_gauge(geom, tw, seed=3):
    rng = np.random.default_rng(seed)
    g = lie.exp_map(lie.random_algebra(rng, (1,), tw.rank, tw.complex_kind, 2.0)[0])
    return GaugeFieldU(geom, tw, np.broadcast_to(g, geom.sizes + g.shape).copy())


# -- curvature -----------------------------------------------------------------------

def test_zero_connection_is_flat():
    geom, tw = _setup(3, 4, 2)
    F = curvature(zeros_connection(geom, tw))
    assert not np.any(F.data)


def test_constant_connection_gives_commutator_so3():
    geom, tw = _setup(2, 4, 3, complex_kind=False)
    A1 = np.zeros((3, 3))
    A1[0, 1], A1[1, 0] = 1.0, -1.0  # e12 - e21
    A2 = np.zeros((3, 3))
    A2[0, 2], A2[2, 0] = 1.0, -1.0  # e13 - e31
    expected = np.zeros((3, 3))
    expected[2, 1], expected[1, 2] = 1.0, -1.0  # e32 - e23
    assert np.array_equal(A1 @ A2 - A2 @ A1, expected)
    A = zeros_connection(geom, tw)
    A.data[..., 0, :, :] = A1
    A.data[..., 1, :, :] = A2
    F = curvature(A)
    assert np.allclose(F.data[..., 0, :, :], expected, atol=1e-14)


@given(st.integers(0, 2**16), st.sampled_from([1, 2, 3]))
def test_constant_connection_curvature_is_commutator(seed, rank):
    geom, tw = _setup(3, 4, rank)
    rng = np.random.default_rng(seed)
    vals = lie.random_algebra(rng, (3,), rank, True, 1.0)
    A = zeros_connection(geom, tw)
    A.data[:] = vals
    F = curvature(A)
    for mu, nu in ((0, 1), (0, 2), (1, 2)):
        assert np.allclose(F.component(mu, nu), lie.commutator(vals[mu], vals[nu]), atol=1e-13)


@pytest.mark.parametrize("k", [1, 2, -1])
def test_u1_constant_curvature(k):
    # The background carrying flux c has F = -2 pi i c / (L_0 L_1), so that
    # tr F = i theta with theta = -2 pi c / (L_0 L_1).
    geom, tw = _setup(2, 16, 1, {(0, 1): k})
    F = curvature(background_connection(geom, tw))
    assert np.allclose(F.data[..., 0, 0, 0], -2j * np.pi * k, atol=1e-12)


def test_curvature_is_skew_and_matches_reference(rng):
    for kwargs in ({"n": 3, "N": 4, "rank": 2},
                   {"n": 4, "N": 4, "rank": 2, "chern": {(0, 1): 1}, "thooft": True},
                   {"n": 3, "N": 5, "rank": 3, "complex_kind": False},
                   {"n": 2, "N": 6, "rank": 1, "chern": {(0, 1): 2}}):
        geom, tw = _setup(**kwargs)
        A = random_connection(geom, tw, 0.5, seed=int(rng.integers(1000)))
        F = curvature(A)
        assert lie.is_skew(F.data)
        assert np.allclose(F.data, curvature_reference(A).data, atol=1e-12)


def test_gradient_matches_reference(rng):
    for kwargs in ({"n": 3, "N": 4, "rank": 2},
                   {"n": 4, "N": 4, "rank": 2, "chern": {(0, 1): 1}, "thooft": True},
                   {"n": 3, "N": 5, "rank": 3, "complex_kind": False},
                   {"n": 5, "N": 4, "rank": 2}):
        geom, tw = _setup(**kwargs)
        A = random_connection(geom, tw, 0.5, seed=int(rng.integers(1000)))
        G = ym_gradient(A)
        assert lie.is_skew(G.data)
        assert np.allclose(G.data, ym_gradient_reference(A).data, atol=1e-11)


# -- gradient ------------------------------------------------------------------------

def test_zero_connection_is_critical():
    geom, tw = _setup(3, 4, 2)
    assert not np.any(ym_gradient(zeros_connection(geom, tw)).data)


@pytest.mark.parametrize("k", [1, 3])
def test_u1_background_is_critical(k):
    geom, tw = _setup(2, 8, 1, {(0, 1): k})
    G = ym_gradient(background_connection(geom, tw))
    assert np.max(np.abs(G.data)) < 1e-12


def test_thooft_background_is_critical():
    geom, tw = _setup(4, 4, 2, {(0, 1): 1}, thooft=True)
    G = ym_gradient(background_connection(geom, tw))
    assert np.max(np.abs(G.data)) < 1e-12


def _central_fd(A, B, h=1e-5):
    def E(s):
        return energy(curvature(A.with_data(A.data + s * B.data)))
    return (E(h) - E(-h)) / (2 * h)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_is_half_the_energy_derivative(seed):
    # <grad, B> = (1/2) dE/ds, checked with a central difference at step 1e-5
    geom, tw = _setup(3, 4, 2)
    A = random_connection(geom, tw, 1.0, seed=seed)
    B = random_connection(geom, tw, 1.0, seed=seed + 100)
    analytic = 2 * l2_inner(ym_gradient(A), B)
    fd = _central_fd(A, B)
    assert abs(fd - analytic) <= 1e-6 * abs(analytic)


def test_gradient_fd_twisted_rank3():
    geom, tw = _setup(3, 4, 3, {(0, 1): 1}, thooft=True)
    A = random_connection(geom, tw, 0.7, seed=4)
    B = A.with_data(lie.random_algebra(np.random.default_rng(5), A.data.shape[:-2], 3, True, 1.0))
    analytic = 2 * l2_inner(ym_gradient(A), B)
    assert abs(_central_fd(A, B) - analytic) <= 1e-6 * abs(analytic)


# -- Bianchi -------------------------------------------------------------------------

def test_bianchi_zero_connection():
    geom, tw = _setup(3, 4, 2)
    assert bianchi_residual(zeros_connection(geom, tw)) == 0.0


@given(st.integers(0, 2**16))
def test_bianchi_constant_connection_is_jacobi(seed):
    geom, tw = _setup(4, 4, 3)
    A = zeros_connection(geom, tw)
    A.data[:] = lie.random_algebra(np.random.default_rng(seed), (4,), 3, True, 1.0)
    assert bianchi_residual(A) < 1e-13


@pytest.mark.slow
def test_bianchi_second_order():
    r16 = bianchi_residual(trig_connection(16))
    r32 = bianchi_residual(trig_connection(32))
    assert 3.4 < r16 / r32 < 4.6


# -- gauge action --------------------------------------------------------------------

def test_gauge_identity_and_constant_on_zero():
    geom, tw = _setup(3, 4, 2)
    A = random_connection(geom, tw, 0.3, seed=0)
    eye = GaugeFieldU(geom, tw, np.broadcast_to(np.eye(2, dtype=complex), geom.sizes + (2, 2)).copy())
    assert np.allclose(gauge_act(eye, A).data, A.data, atol=1e-14)
    assert not np.any(gauge_act(constant_gauge(geom, tw), zeros_connection(geom, tw)).data)


def test_gauge_geometry_mismatch():
    geom, tw = _setup(3, 4, 2)
    geom2, tw2 = _setup(3, 5, 2)
    with pytest.raises(GeometryMismatchError):
        gauge_act(constant_gauge(geom2, tw2), zeros_connection(geom, tw))


def test_non_constant_gauge_preserves_skewness():
    A = trig_connection(8)
    u = smooth_gauge(A.geometry, A.twist)
    assert lie.is_skew(gauge_act(u, A).data)


@pytest.mark.slow
def test_gauge_covariance_of_curvature_second_order():
    errs = []
    for N in (16, 32):
        A = trig_connection(N)
        u = smooth_gauge(A.geometry, A.twist)
        lhs = curvature(gauge_act(u, A))
        rhs = conjugate_twoform(u, curvature(A))
        errs.append(np.max(np.abs(lhs.data - rhs.data)))
    assert 3.4 < errs[0] / errs[1] < 4.6


@pytest.mark.parametrize("kw", [{"n": 3, "N": 4, "rank": 2},
                                {"n": 3, "N": 4, "rank": 3, "complex_kind": False}])
def test_constant_gauge_equivariance(kw):
    geom, tw = _setup(**kw)
    A = random_connection(geom, tw, 0.8, seed=2)
    u = constant_gauge(geom, tw)
    g = u.data.reshape(-1, tw.rank, tw.rank)[0]
    uA = gauge_act(u, A)
    E0, E1 = energy(curvature(A)), energy(curvature(uA))
    assert abs(E1 - E0) / E0 < 1e-10
    G = ym_gradient(A).data
    assert np.allclose(ym_gradient(uA).data, g @ G @ lie.dagger(g), atol=1e-12)


def test_energy_nearly_invariant_under_smooth_gauge():
    errs = []
    for N in (8, 16):
        A = trig_connection(N)
        u = smooth_gauge(A.geometry, A.twist)
        E0 = energy(curvature(A))
        errs.append(abs(energy(curvature(gauge_act(u, A))) - E0) / E0)
    assert errs[1] < errs[0] / 3


# -- Chern numbers -------------------------------------------------------------------

def test_chern_untwisted_is_zero():
    geom, tw = _setup(3, 6, 2)
    F = curvature(random_connection(geom, tw, 1.0, seed=0))
    for axes in ((0, 1), (0, 2), (1, 2)):
        assert abs(chern_integral(F, axes)) < 1e-10


def test_chern_u1_flux_one():
    geom, tw = _setup(2, 16, 1, {(0, 1): 1})
    F = curvature(background_connection(geom, tw))
    assert abs(chern_integral(F, (0, 1)) - 1) < 1e-3
    assert abs(chern_integral(F, (1, 0)) + 1) < 1e-3


def test_chern_twisted_random_connection():
    geom, tw = _setup(4, 4, 2, {(0, 1): 1}, thooft=True)
    F = curvature(random_connection(geom, tw, 0.5, seed=1))
    assert abs(chern_integral(F, (0, 1)) - 1) < 1e-10
    assert abs(chern_integral(F, (2, 3))) < 1e-10


def test_chern_real_kind_unsupported():
    geom, tw = _setup(2, 4, 2, complex_kind=False)
    F = TwoFormField(geom, tw, np.zeros(geom.sizes + (1, 2, 2)))
    with pytest.raises(UnsupportedKindError):
        chern_integral(F, (0, 1))

import numpy as np
import pytest

from ymlab.calculus import UnsupportedKindError
from ymlab.flow import StiffnessStop
from ymlab.hym import (ComplexTorusGeometry, HermitianMetricField, HolomorphicStructure,
                       HymConfig, HymState, MetricError, chern_connection, conformal_normalize,
                       connection_identity_residual, curvature_identity_residual, hym_operator,
                       hym_step, identity_metric, metric_sqrt, random_smooth_metric, run_hym,
                       slope_lambda, tracefree_l2_h, trace_identity_residual, ym_from_hym)
from ymlab.lattice import TwistCocycle


def _torus(N=16, m=1, L=1.0):
    return ComplexTorusGeometry.build(m, (N,) * (2 * m), L / N)


def _scalar_metric(geom, psi, rank=1):
    return HermitianMetricField(geom, np.exp(psi)[..., None, None] * np.eye(rank, dtype=complex))


def _smooth_psi(geom, amp=0.4):
    x, y = geom.lattice.coordinates()[:2]
    return amp * np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y) + 0.3 * amp * np.cos(4 * np.pi * y)


def _laplacian_psi(geom, amp=0.4):
    x, y = geom.lattice.coordinates()[:2]
    return (-8 * np.pi**2 * amp * np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y)
            - 16 * np.pi**2 * 0.3 * amp * np.cos(4 * np.pi * y))


# -- Chern connection ------------------------------------------------------------------

def test_identity_metric_is_flat():
    geom = _torus(8)
    tw = TwistCocycle.untwisted(2, 2)
    hol = HolomorphicStructure.standard(geom, tw)
    conn, F = chern_connection(identity_metric(geom, 2), hol)
    assert np.max(np.abs(conn.data)) == 0.0
    assert np.max(np.abs(F.data)) == 0.0


def test_scaling_the_metric_leaves_curvature_unchanged():
    geom = _torus(8)
    tw = TwistCocycle.untwisted(2, 2)
    hol = HolomorphicStructure.standard(geom, tw)
    H = random_smooth_metric(geom, tw, 0.5, seed=1)
    _, F1 = chern_connection(H, hol)
    _, F2 = chern_connection(HermitianMetricField(geom, 3.7 * H.data), hol)
    assert np.allclose(F1.data, F2.data, atol=1e-11)


def test_line_bundle_curvature_second_order():
    # F_{xy} = (i/2) Laplacian(psi) for H = exp(psi)
    errs = []
    for N in (16, 32):
        geom = _torus(N)
        hol = HolomorphicStructure.standard(geom, TwistCocycle.untwisted(2, 1))
        _, F = chern_connection(_scalar_metric(geom, _smooth_psi(geom)), hol)
        exact = 0.5j * _laplacian_psi(geom)
        errs.append(np.max(np.abs(F.data[..., 0, 0, 0] - exact)) / np.max(np.abs(exact)))
    assert errs[1] < 0.05
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_non_positive_metric_rejected():
    geom = _torus(8)
    hol = HolomorphicStructure.standard(geom, TwistCocycle.untwisted(2, 2))
    H = identity_metric(geom, 2)
    H.data[3, 4] = np.diag([1.0, -1.0])
    with pytest.raises(MetricError):
        H.validate()
    with pytest.raises(MetricError):
        chern_connection(H, hol)


def test_holomorphic_structure_checks():
    geom = _torus(8)
    with pytest.raises(UnsupportedKindError):
        HolomorphicStructure.standard(geom, TwistCocycle.untwisted(2, 2, complex_kind=False))
    g2 = _torus(4, m=2)
    tw = TwistCocycle.untwisted(4, 2)
    assert HolomorphicStructure.standard(g2, tw).integrability_residual() == 0.0
    extra = np.zeros(g2.sizes + (2, 2, 2), dtype=complex)
    extra[..., 0, :, :] = np.array([[0, 1], [0, 0]])
    extra[..., 1, :, :] = np.array([[0, 0], [1, 0]])  # constant, non-commuting
    with pytest.raises(ValueError):
        HolomorphicStructure.standard(g2, tw, extra)


# -- slope -----------------------------------------------------------------------------

def test_slope_examples():
    geom = _torus(8)
    assert slope_lambda(geom, TwistCocycle.untwisted(2, 2)) == 0.0
    geom = _torus(8, L=np.sqrt(2 * np.pi))
    assert slope_lambda(geom, TwistCocycle.from_pairs(2, 1, {(0, 1): 1})) == pytest.approx(1.0)
    geom = _torus(8)
    assert slope_lambda(geom, TwistCocycle.thooft(2, 2, {(0, 1): 1})) == pytest.approx(np.pi)


def test_slope_in_complex_dimension_two():
    geom = _torus(4, m=2)
    tw = TwistCocycle.from_pairs(4, 1, {(0, 1): 1, (2, 3): 2})
    # deg = (1 + 2) with unit volume, so lambda = 2 pi * 3
    assert slope_lambda(geom, tw) == pytest.approx(6 * np.pi)


# -- the flow --------------------------------------------------------------------------

def test_hermitian_einstein_metric_is_stationary():
    geom = _torus(16)
    tw = TwistCocycle.from_pairs(2, 1, {(0, 1): 1})
    hol = HolomorphicStructure.standard(geom, tw)
    st = HymState.initial(identity_metric(geom, 1), hol, 1e-3)
    assert np.max(np.abs(st.K)) < 1e-12
    new = hym_step(st, hol, HymConfig(dt_init=1e-3))
    assert np.max(np.abs(new.H.data - st.H.data)) < 1e-12


def test_line_bundle_flow_matches_fourier_heat_flow():
    # r = 1: d psi/dt = Laplacian psi with the wide (centered-squared) stencil
    geom = _torus(16)
    hol = HolomorphicStructure.standard(geom, TwistCocycle.untwisted(2, 1))
    psi = _smooth_psi(geom) + 0.05 * np.random.default_rng(0).normal(size=geom.sizes)
    cfg = HymConfig(dt_init=1e-5, t_end=0.01, tolerance=1e-7)
    out = run_hym(HymState.initial(_scalar_metric(geom, psi), hol, cfg.dt_init), hol, cfg,
                  cadence=1000, ktol=0.0)
    a = geom.spacing
    ks = np.meshgrid(*[2 * np.pi * np.fft.fftfreq(N, d=a) for N in geom.sizes], indexing="ij")
    sym = -sum(np.sin(k * a) ** 2 for k in ks) / a**2
    exact = np.fft.ifftn(np.fft.fftn(psi) * np.exp(sym * out.state.t)).real
    got = np.log(out.state.H.data[..., 0, 0].real)
    assert np.max(np.abs(got - exact)) < 1e-5


def test_determinant_law_is_second_order_in_dt():
    geom = _torus(16)
    tw = TwistCocycle.untwisted(2, 2)
    hol = HolomorphicStructure.standard(geom, tw)
    st = HymState.initial(random_smooth_metric(geom, tw, 0.5, modes=2, seed=3), hol, 1e-4)
    res = []
    for dt in (1e-4, 5e-5):
        new = hym_step(st, hol, HymConfig(dt_init=dt, dt_max=dt, tolerance=1.0))
        rate = (new.H.log_det() - st.H.log_det()) / dt
        trK = np.real(np.trace(st.K + new.K, axis1=-2, axis2=-1))  # 2 tr K at the midpoint
        res.append(np.max(np.abs(rate + trK)))
    assert 3.5 < res[0] / res[1] < 4.5


def test_positivity_floor_forces_stiffness_stop():
    geom = _torus(8)
    tw = TwistCocycle.untwisted(2, 2)
    hol = HolomorphicStructure.standard(geom, tw)
    st = HymState.initial(random_smooth_metric(geom, tw, 0.5, seed=0), hol, 1e-4)
    cfg = HymConfig(dt_init=1e-4, eig_floor=1e3)
    with pytest.raises(StiffnessStop):
        hym_step(st, hol, cfg)
    assert run_hym(st, hol, cfg).outcome == "stiff-stop"


def test_step_keeps_metric_hermitian_positive():
    geom = _torus(8)
    tw = TwistCocycle.untwisted(2, 3)
    hol = HolomorphicStructure.standard(geom, tw)
    st = HymState.initial(random_smooth_metric(geom, tw, 0.8, seed=5), hol, 1e-4)
    for _ in range(5):
        st = hym_step(st, hol, HymConfig())
    st.H.validate(herm_tol=1e-13)


@pytest.mark.parametrize("kw", [{"dt_min": 1e-2}, {"dt_max": 1e-6}, {"tolerance": 0.0}])
def test_bad_hym_config(kw):
    with pytest.raises(ValueError):
        HymConfig(**kw)


# -- conformal normalization -----------------------------------------------------------

def test_normalize_balanced_metric_gives_zero_phi():
    geom = _torus(8)
    hol = HolomorphicStructure.standard(geom, TwistCocycle.thooft(2, 2, {(0, 1): 1}))
    _, phi = conformal_normalize(identity_metric(geom, 2), hol)
    assert np.max(np.abs(phi)) < 1e-12


def test_normalize_line_bundle_recovers_minus_psi():
    geom = _torus(16)
    hol = HolomorphicStructure.standard(geom, TwistCocycle.from_pairs(2, 1, {(0, 1): 1}))
    rng = np.random.default_rng(2)
    psi = _smooth_psi(geom) + 0.1 * rng.normal(size=geom.sizes)
    psi -= np.fft.ifftn(np.fft.fftn(psi) * _nyquist_mask(geom)).real  # keep it off the null modes
    H0, phi = conformal_normalize(_scalar_metric(geom, psi), hol)
    assert np.max(np.abs(phi - (-(psi - psi.mean())))) < 1e-10
    assert np.max(np.abs(H0.data[..., 0, 0].real - 1.0)) < 1e-10


def _nyquist_mask(geom):
    # modes with every k in {0, pi/a} are invisible to the centered stencil
    masks = [np.isin(np.arange(N), (0, N // 2)) for N in geom.sizes]
    return np.logical_and.outer(*masks)


def test_normalize_keeps_tracefree_curvature():
    geom = _torus(16)
    tw = TwistCocycle.untwisted(2, 2)
    hol = HolomorphicStructure.standard(geom, tw)
    K0 = random_smooth_metric(geom, tw, 0.5, seed=4)
    H0, phi = conformal_normalize(K0, hol)
    F_K, _ = hym_operator(K0, hol, 0.0)
    F_H, K = hym_operator(H0, hol, 0.0)
    assert np.max(np.abs(np.trace(K, axis1=-2, axis2=-1))) < 1e-8
    assert tracefree_l2_h(F_K, K0.data) == pytest.approx(tracefree_l2_h(F_H, H0.data), abs=1e-10)


# -- identities ------------------------------------------------------------------------

def test_trace_identity_trivial_and_abelian():
    geom = _torus(16)
    tw = TwistCocycle.untwisted(2, 1)
    hol = HolomorphicStructure.standard(geom, tw)
    H0 = random_smooth_metric(geom, tw, 0.4, seed=1)
    assert trace_identity_residual(H0, H0, hol) == 0.0
    H = HermitianMetricField(geom, np.exp(_smooth_psi(geom))[..., None, None] * H0.data)
    # the discrete identity holds to roundoff, not just to second order
    assert trace_identity_residual(H, H0, hol) < 1e-10


@pytest.mark.slow
def test_connection_and_curvature_identities_second_order():
    conn, curv = [], []
    for N in (16, 32, 64):
        geom = _torus(N)
        tw = TwistCocycle.untwisted(2, 2)
        hol = HolomorphicStructure.standard(geom, tw)
        H0 = random_smooth_metric(geom, tw, 0.5, modes=1, seed=1)
        H = random_smooth_metric(geom, tw, 0.5, modes=1, seed=2)
        conn.append(connection_identity_residual(H, H0, hol))
        curv.append(curvature_identity_residual(H, H0, hol))
    assert 3.5 < conn[1] / conn[2] < 4.5
    assert 3.4 < curv[1] / curv[2] < 4.6


def test_normalized_flow_keeps_det_and_trace_identity():
    geom = _torus(16)
    tw = TwistCocycle.untwisted(2, 2)
    hol = HolomorphicStructure.standard(geom, tw)
    H0, _ = conformal_normalize(random_smooth_metric(geom, tw, 0.5, seed=3), hol)
    cfg = HymConfig(dt_init=1e-4, t_end=0.05)
    out = run_hym(HymState.initial(H0, hol, cfg.dt_init), hol, cfg, cadence=5, ktol=0.0)
    assert max(r["det_h_drift"] for r in out.records) < 1e-8
    assert max(r["trace_identity_residual"] for r in out.records) < 1e-6
    tf = [r["tracefree_l2"] for r in out.records]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(tf, tf[1:]))


# -- HYM to YM -------------------------------------------------------------------------

def test_ym_from_hym_examples():
    geom = _torus(8)
    tw = TwistCocycle.untwisted(2, 2)
    hol = HolomorphicStructure.standard(geom, tw)
    H0 = random_smooth_metric(geom, tw, 0.5, seed=1)
    H1 = random_smooth_metric(geom, tw, 0.5, seed=2)
    assert np.allclose(metric_sqrt(H0, H0), np.eye(2), atol=1e-12)
    out = ym_from_hym([(0.0, H0), (0.1, H1)], H0, hol)
    _, F0 = chern_connection(H0, hol)
    assert np.allclose(out[0]["curvature"].data, F0.data, atol=1e-12)
    for rec in out:
        assert rec["norm_h0"] == pytest.approx(rec["norm_h"], rel=1e-10)
    sigma = metric_sqrt(H1, H0)
    h = np.linalg.solve(H0.data, H1.data)
    assert np.allclose(sigma @ sigma, h, atol=1e-10)


def test_ym_from_hym_line_bundle_is_plain_curvature():
    geom = _torus(8)
    tw = TwistCocycle.untwisted(2, 1)
    hol = HolomorphicStructure.standard(geom, tw)
    H0 = identity_metric(geom, 1)
    H = _scalar_metric(geom, _smooth_psi(geom))
    out = ym_from_hym([(0.0, H0), (1.0, H)], H0, hol)
    _, F = chern_connection(H, hol)
    assert np.allclose(out[1]["curvature"].data, F.data, rtol=0, atol=1e-12)

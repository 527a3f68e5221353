"""Fused numba stencils for curvature and the Yang-Mills gradient.

Fields are passed flattened to ``(sites, components, r, r)``.  Neighbour
tables hold the flat index of ``x +- e_mu`` and whether that hop crosses
the fundamental domain, in which case the twist is applied on the fly.
Loops run in site order, so results are bit-identical run to run.
"""
from __future__ import annotations

from functools import lru_cache

import numba
import numpy as np

from .lattice import LatticeGeometry, TwistCocycle, axis_pairs


@lru_cache(maxsize=16)
def neighbour_tables(sizes: tuple[int, ...]):
    n = len(sizes)
    idx = np.arange(int(np.prod(sizes))).reshape(sizes)
    fwd = np.empty((idx.size, n), dtype=np.int64)
    bwd = np.empty((idx.size, n), dtype=np.int64)
    wf = np.empty((idx.size, n), dtype=np.bool_)
    wb = np.empty((idx.size, n), dtype=np.bool_)
    for mu in range(n):
        fwd[:, mu] = np.roll(idx, -1, axis=mu).ravel()
        bwd[:, mu] = np.roll(idx, 1, axis=mu).ravel()
        coord = np.indices(sizes)[mu].ravel()
        wf[:, mu] = coord == sizes[mu] - 1
        wb[:, mu] = coord == 0
    for arr in (fwd, bwd, wf, wb):
        arr.setflags(write=False)
    return fwd, bwd, wf, wb


def twist_arrays(geom: LatticeGeometry, twist: TwistCocycle, dtype):
    g = np.ascontiguousarray(twist.g, dtype=dtype)
    gi = np.ascontiguousarray(np.conj(np.swapaxes(twist.g, -1, -2)), dtype=dtype)
    s = np.zeros((geom.n, geom.n), dtype=dtype)
    if twist.complex_kind:
        for mu in range(geom.n):
            s[mu] = twist.connection_shift(mu, geom.lengths)
    return g, gi, s


@numba.njit(cache=True)
def _transport(A, h, c, g, gi, s, d, tmp, out):
    """out = g_d A_c(h) g_d^-1 + s_d[c], the value seen across face d."""
    r = A.shape[2]
    for i in range(r):
        for j in range(r):
            acc = g[d, i, 0] * A[h, c, 0, j]
            for l in range(1, r):
                acc += g[d, i, l] * A[h, c, l, j]
            tmp[i, j] = acc
    for i in range(r):
        for j in range(r):
            acc = tmp[i, 0] * gi[d, 0, j]
            for l in range(1, r):
                acc += tmp[i, l] * gi[d, l, j]
            out[i, j] = acc
        out[i, i] += s[d, c]


@numba.njit(cache=True)
def _pull_back_wrapped(C, h, k, g, gi, d, G, x, c):
    """G[x, c] += g_d^-1 C_k(h) g_d, the value seen back across face d."""
    r = C.shape[2]
    for i in range(r):
        for j in range(r):
            acc = 0.0 * C[h, k, 0, 0]
            for l in range(r):
                gl = gi[d, i, l]
                for m in range(r):
                    acc += gl * C[h, k, l, m] * g[d, m, j]
            G[x, c, i, j] += acc


@numba.njit(cache=True)
def curvature_kernel(A, fwd, wf, g, gi, s, a, pmu, pnu, F):
    S = A.shape[0]
    r = A.shape[2]
    npair = pmu.shape[0]
    Anf = np.empty((r, r), A.dtype)
    Amf = np.empty((r, r), A.dtype)
    P = np.empty((r, r), A.dtype)
    Q = np.empty((r, r), A.dtype)
    tmp = np.empty((r, r), A.dtype)
    inv_a = 1.0 / a
    for x in range(S):
        for k in range(npair):
            mu = pmu[k]
            nu = pnu[k]
            # explicit branches: numba inlining of these hurts vectorization
            h = fwd[x, mu]
            if wf[x, mu]:
                _transport(A, h, nu, g, gi, s, mu, tmp, Anf)
            else:
                for i in range(r):
                    for j in range(r):
                        Anf[i, j] = A[h, nu, i, j]
            h = fwd[x, nu]
            if wf[x, nu]:
                _transport(A, h, mu, g, gi, s, nu, tmp, Amf)
            else:
                for i in range(r):
                    for j in range(r):
                        Amf[i, j] = A[h, mu, i, j]
            for i in range(r):
                for j in range(r):
                    P[i, j] = 0.5 * (A[x, mu, i, j] + Amf[i, j])
                    Q[i, j] = 0.5 * (A[x, nu, i, j] + Anf[i, j])
            for i in range(r):
                for j in range(r):
                    c = P[i, 0] * Q[0, j] - Q[i, 0] * P[0, j]
                    for l in range(1, r):
                        c += P[i, l] * Q[l, j] - Q[i, l] * P[l, j]
                    tmp[i, j] = ((Anf[i, j] - A[x, nu, i, j])
                                 - (Amf[i, j] - A[x, mu, i, j])) * inv_a + c
            for i in range(r):
                for j in range(r):
                    F[x, k, i, j] = 0.5 * (tmp[i, j] - np.conj(tmp[j, i]))


@numba.njit(cache=True)
def gradient_kernel(A, F, fwd, bwd, wf, wb, g, gi, s, a, pmu, pnu, G, C1, C2):
    """G = D_A^* F; C1, C2 are (sites, pairs, r, r) scratch buffers.

    Pass one adds the terms that live at x and stores the ones that belong
    to x + e_mu (C1) and x + e_nu (C2); pass two gathers them back.
    """
    S = A.shape[0]
    r = A.shape[2]
    n = A.shape[1]
    npair = pmu.shape[0]
    Anf = np.empty((r, r), A.dtype)
    Amf = np.empty((r, r), A.dtype)
    P = np.empty((r, r), A.dtype)
    Q = np.empty((r, r), A.dtype)
    tmp = np.empty((r, r), A.dtype)
    inv_a = 1.0 / a
    G[:] = 0
    for x in range(S):
        for k in range(npair):
            mu = pmu[k]
            nu = pnu[k]
            # explicit branches: numba inlining of these hurts vectorization
            h = fwd[x, mu]
            if wf[x, mu]:
                _transport(A, h, nu, g, gi, s, mu, tmp, Anf)
            else:
                for i in range(r):
                    for j in range(r):
                        Anf[i, j] = A[h, nu, i, j]
            h = fwd[x, nu]
            if wf[x, nu]:
                _transport(A, h, mu, g, gi, s, nu, tmp, Amf)
            else:
                for i in range(r):
                    for j in range(r):
                        Amf[i, j] = A[h, mu, i, j]
            for i in range(r):
                for j in range(r):
                    P[i, j] = 0.5 * (A[x, mu, i, j] + Amf[i, j])
                    Q[i, j] = 0.5 * (A[x, nu, i, j] + Anf[i, j])
            for i in range(r):
                for j in range(r):
                    fp = F[x, k, i, 0] * P[0, j] - P[i, 0] * F[x, k, 0, j]
                    qf = Q[i, 0] * F[x, k, 0, j] - F[x, k, i, 0] * Q[0, j]
                    for l in range(1, r):
                        fp += F[x, k, i, l] * P[l, j] - P[i, l] * F[x, k, l, j]
                        qf += Q[i, l] * F[x, k, l, j] - F[x, k, i, l] * Q[l, j]
                    fa = F[x, k, i, j] * inv_a
                    fp *= 0.5
                    qf *= 0.5
                    G[x, nu, i, j] += fp - fa
                    G[x, mu, i, j] += fa + qf
                    C1[x, k, i, j] = fa + fp
                    C2[x, k, i, j] = qf - fa
    for x in range(S):
        for k in range(npair):
            mu = pmu[k]
            nu = pnu[k]
            h = bwd[x, mu]
            if wb[x, mu]:
                _pull_back_wrapped(C1, h, k, g, gi, mu, G, x, nu)
            else:
                for i in range(r):
                    for j in range(r):
                        G[x, nu, i, j] += C1[h, k, i, j]
            h = bwd[x, nu]
            if wb[x, nu]:
                _pull_back_wrapped(C2, h, k, g, gi, nu, G, x, mu)
            else:
                for i in range(r):
                    for j in range(r):
                        G[x, mu, i, j] += C2[h, k, i, j]
        for mu in range(n):
            for i in range(r):
                for j in range(i, r):
                    v = 0.5 * (G[x, mu, i, j] - np.conj(G[x, mu, j, i]))
                    G[x, mu, i, j] = v
                    G[x, mu, j, i] = -np.conj(v)


class StencilPlan:
    """Pre-packed tables and scratch for repeated evaluation on one lattice."""

    def __init__(self, geom: LatticeGeometry, twist: TwistCocycle):
        self.geometry = geom
        self.twist = twist
        self.dtype = np.complex128 if twist.complex_kind else np.float64
        self.fwd, self.bwd, self.wf, self.wb = neighbour_tables(geom.sizes)
        self.g, self.gi, self.s = twist_arrays(geom, twist, self.dtype)
        pairs = axis_pairs(geom.n)
        self.pmu = np.array([p[0] for p in pairs], dtype=np.int64)
        self.pnu = np.array([p[1] for p in pairs], dtype=np.int64)
        self.S = geom.n_sites
        r = twist.rank
        self.pair_shape = (self.S, len(pairs), r, r)
        self._scratch = None

    def _flat(self, data, comps):
        r = self.twist.rank
        return np.ascontiguousarray(data, dtype=self.dtype).reshape(self.S, comps, r, r)

    def curvature(self, A_data: np.ndarray) -> np.ndarray:
        A = self._flat(A_data, self.geometry.n)
        F = np.empty(self.pair_shape, self.dtype)
        curvature_kernel(A, self.fwd, self.wf, self.g, self.gi, self.s, self.geometry.spacing,
                         self.pmu, self.pnu, F)
        return F.reshape(self.geometry.sizes + self.pair_shape[1:])

    def gradient(self, A_data: np.ndarray, F_data: np.ndarray) -> np.ndarray:
        A = self._flat(A_data, self.geometry.n)
        F = self._flat(F_data, self.pair_shape[1])
        if self._scratch is None:
            self._scratch = (np.empty(self.pair_shape, self.dtype),
                             np.empty(self.pair_shape, self.dtype))
        G = np.empty_like(A)
        gradient_kernel(A, F, self.fwd, self.bwd, self.wf, self.wb, self.g, self.gi, self.s,
                        self.geometry.spacing, self.pmu, self.pnu, G, *self._scratch)
        return G.reshape(A_data.shape)


_PLANS: dict = {}


def plan_for(geom: LatticeGeometry, twist: TwistCocycle) -> StencilPlan:
    key = (geom, id(twist))
    plan = _PLANS.get(key)
    if plan is None or plan.twist is not twist:
        if len(_PLANS) > 8:
            _PLANS.clear()
        plan = _PLANS[key] = StencilPlan(geom, twist)
    return plan

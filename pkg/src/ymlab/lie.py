"""Dense matrix Lie algebra helpers for u(r) and so(r).

Every function acts on the trailing two axes, so a whole lattice field of
shape ``(..., r, r)`` can be passed in one call.
"""
from __future__ import annotations

import numpy as np

MAX_RANK = 8


class DimensionError(ValueError):
    pass


def dagger(m: np.ndarray) -> np.ndarray:
    """Adjoint with respect to the standard fiber metric."""
    return np.conj(np.swapaxes(m, -1, -2))


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-2:] != b.shape[-2:]:
        raise DimensionError(f"rank mismatch: {a.shape[-2:]} vs {b.shape[-2:]}")
    if np.iscomplexobj(a) != np.iscomplexobj(b):
        raise DimensionError("scalar kind mismatch (real vs complex)")


def inner_product(a: np.ndarray, b: np.ndarray) -> np.ndarray | float:
    """Re tr(a b^*), reduced over the matrix axes only."""
    _check_pair(a, b)
    val = np.einsum("...ij,...ij->...", a, np.conj(b)).real
    return float(val) if np.ndim(val) == 0 else val


def norm2(m: np.ndarray) -> np.ndarray:
    """Pointwise squared Frobenius norm |m|^2 = <m, m>."""
    if np.iscomplexobj(m):
        return np.sum(m.real**2 + m.imag**2, axis=(-2, -1))
    return np.sum(m**2, axis=(-2, -1))


def sup_norm(m: np.ndarray) -> float:
    """max over all leading indices of the Frobenius norm; unitarily invariant."""
    return float(np.sqrt(np.max(norm2(m), initial=0.0)))


def skew_project(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m - dagger(m))


def herm_project(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + dagger(m))


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


def trace(m: np.ndarray) -> np.ndarray:
    return np.trace(m, axis1=-2, axis2=-1)


def trace_free_part(m: np.ndarray) -> np.ndarray:
    r = m.shape[-1]
    out = m.copy()
    mean = trace(m) / r
    idx = np.arange(r)
    out[..., idx, idx] -= mean[..., None]
    return out


def trace_part(m: np.ndarray) -> np.ndarray:
    """(tr m / r) Id, the complement of :func:`trace_free_part`."""
    r = m.shape[-1]
    return (trace(m) / r)[..., None, None] * np.eye(r, dtype=m.dtype)


def exp_map(a: np.ndarray) -> np.ndarray:
    """Matrix exponential of skew elements through the Hermitian eigendecomposition.

    Using ``eigh`` on ``i a`` keeps the result unitary (or orthogonal) to
    roundoff, which a generic Pade ``expm`` does not guarantee.
    """
    a = skew_project(np.asarray(a))
    w, v = np.linalg.eigh(1j * a)
    out = (v * np.exp(-1j * w)[..., None, :]) @ dagger(v)
    if not np.iscomplexobj(a):
        out = out.real.copy()
    return out


def herm_func(m: np.ndarray, f) -> np.ndarray:
    """Apply a scalar function to a batch of Hermitian matrices spectrally."""
    w, v = np.linalg.eigh(herm_project(m))
    return (v * f(w)[..., None, :]) @ dagger(v)


def is_skew(m: np.ndarray, rtol: float = 1e-12) -> bool:
    scale = max(float(np.max(np.abs(m), initial=0.0)), 1.0)
    return bool(np.max(np.abs(m + dagger(m)), initial=0.0) <= rtol * scale)


def is_unitary(g: np.ndarray, atol: float = 1e-10) -> bool:
    r = g.shape[-1]
    return bool(np.max(np.abs(dagger(g) @ g - np.eye(r)), initial=0.0) <= atol)


def random_algebra(rng: np.random.Generator, shape: tuple[int, ...], rank: int,
                   complex_kind: bool = True, amplitude: float = 1.0) -> np.ndarray:
    """Skew elements whose entries have modulus at most ``amplitude``."""
    full = tuple(shape) + (rank, rank)
    mag = amplitude * rng.random(full)
    if complex_kind:
        phase = np.exp(2j * np.pi * rng.random(full))
        return skew_project(mag * phase)
    sign = np.where(rng.random(full) < 0.5, -1.0, 1.0)
    return skew_project(mag * sign)


def log_unitary(w: np.ndarray) -> np.ndarray:
    """Principal logarithm of unitary matrices whose eigenphases lie in (-pi/2, pi/2).

    ``(w - w^*) / 2i`` is Hermitian with eigenvalues sin(theta) and shares
    eigenvectors with the normal matrix ``w``; arcsin recovers theta.
    """
    s = (w - dagger(w)) / 2j
    vals, vecs = np.linalg.eigh(s)
    c = np.real(np.einsum("...ji,...jk,...ki->...i", np.conj(vecs), w + dagger(w), vecs)) / 2
    if np.any(c <= 0):
        raise ValueError("eigenphase outside (-pi/2, pi/2); link too far from identity")
    out = (vecs * (1j * np.arcsin(np.clip(vals, -1, 1)))[..., None, :]) @ dagger(vecs)
    if not np.iscomplexobj(w):
        out = out.real.copy()
    return out

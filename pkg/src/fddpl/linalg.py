"""Shared linear-algebra helpers.

Conventions fixed package-wide:

* ``vec`` stacks the columns of a matrix; ``unvec`` undoes it.
* Kronecker products act as ``(A kron B) vec(X) = vec(B X A^T)``, so the
  left factor indexes the slow (column-block) dimension.
* Complex Gaussians are circularly symmetric with density
  ``pi^-d det(C)^-1 exp(-x^H C^-1 x)``.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg


def vec(a: np.ndarray) -> np.ndarray:
    """Column-stack the trailing two axes: (..., m, n) -> (..., m*n)."""
    a = np.asarray(a)
    return np.swapaxes(a, -1, -2).reshape(*a.shape[:-2], -1)


def unvec(x: np.ndarray, m: int, n: int) -> np.ndarray:
    """Inverse of :func:`vec`: (..., m*n) -> (..., m, n), column-stacked."""
    x = np.asarray(x)
    return np.swapaxes(x.reshape(*x.shape[:-1], n, m), -1, -2)


def herm(a: np.ndarray) -> np.ndarray:
    """Hermitian part (a + a^H)/2 over the trailing two axes."""
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def is_hermitian(a: np.ndarray, tol: float = 1e-12) -> bool:
    a = np.asarray(a)
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    return bool(np.abs(a - a.conj().T).max(initial=0.0) <= tol * scale)


def eigh_descending(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hermitian eigendecomposition with eigenvalues sorted descending.

    Ordering among equal eigenvalues is the reversed LAPACK output, which is
    deterministic for a fixed backend; callers that need bit-stable
    eigenvectors should additionally apply :func:`phase_normalize`.
    """
    w, u = np.linalg.eigh(a)
    return w[::-1], u[:, ::-1]


def phase_normalize(u: np.ndarray) -> np.ndarray:
    """Rotate each column so its largest-magnitude entry is real positive."""
    u = np.array(u, copy=True)
    idx = np.argmax(np.abs(u), axis=0)
    pivots = u[idx, np.arange(u.shape[1])]
    mags = np.abs(pivots)
    mags[mags == 0] = 1.0
    u *= (pivots / mags).conj()
    return u


def psd_sqrt(c: np.ndarray, neg_tol: float = 1e-10) -> np.ndarray:
    """Factor B of a Hermitian PSD matrix with B B^H = C.

    Uses the eigendecomposition so that rank-deficient matrices (common for
    narrow angular spreads) factor cleanly.  Eigenvalues below ``-neg_tol``
    relative to the largest one raise, mildly negative ones are clipped.
    """
    w, u = np.linalg.eigh(herm(c))
    scale = max(float(w[-1]), 1.0)
    if w[0] < -neg_tol * scale:
        raise np.linalg.LinAlgError(
            f"matrix is not PSD: min eigenvalue {w[0]:.3e}"
        )
    return u * np.sqrt(np.clip(w, 0.0, None))


def cholesky_psd(c: np.ndarray, jitter: float = 1e-12) -> np.ndarray:
    """Lower Cholesky factor, retrying with a scaled-identity jitter.

    Intended for matrices that are PD in exact arithmetic but may lose
    definiteness to rounding (e.g. responsibility-weighted sample
    covariances).
    """
    c = herm(c)
    d = c.shape[-1]
    eps = jitter * max(float(np.real(np.trace(c))) / d, np.finfo(float).tiny)
    for trial in range(4):
        try:
            return scipy.linalg.cholesky(c, lower=True)
        except scipy.linalg.LinAlgError:
            c = c + (eps * 10.0**trial) * np.eye(d)
    raise np.linalg.LinAlgError("Cholesky failed even with jitter")


def complex_randn(rng: np.random.Generator, shape) -> np.ndarray:
    """I.i.d. standard circularly-symmetric complex Gaussians, CN(0, 1)."""
    return (
        rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    ) / np.sqrt(2.0)


def spectral_norm(a: np.ndarray) -> float:
    """Largest singular value (exact, via SVD)."""
    return float(np.linalg.norm(a, 2))


def principal_angle_residual(a: np.ndarray, b: np.ndarray) -> float:
    """Distance between the row spaces of two matrices.

    Returns ``1 - min_i cos(theta_i)`` over the principal angles, i.e. zero
    when the row spaces coincide.
    """
    qa = np.linalg.qr(a.conj().T)[0]
    qb = np.linalg.qr(b.conj().T)[0]
    s = np.linalg.svd(qa.conj().T @ qb, compute_uv=False)
    return float(1.0 - s.min())

"""Symmetric 4x4 eigendecomposition via cyclic Jacobi rotations.

Jacobi is unconditionally stable at this size and avoids the conditioning
trouble a characteristic-polynomial solver runs into near multiple roots.
The batch routine sweeps all matrices simultaneously with vectorized
rotations; convergence is reached when the off-diagonal Frobenius norm
drops below 1e-13 of the matrix norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

__all__ = ["EigenResult", "jacobi_eigh", "smallest_eigenvector"]

_SWEEP_LIMIT = 50
_CONV_FACTOR = 1e-13
_TIE_FACTOR = 1e-12


@dataclass(frozen=True)
class EigenResult:
    """Smallest eigenpair of a symmetric 4x4 matrix plus a stability hint.

    ``gap_ratio`` is the second-smallest eigenvalue over the smallest
    (floored at machine tiny); values near or below 1 signal a degenerate
    or tied smallest eigenvalue.
    """

    eigenvalue: float
    eigenvector: np.ndarray
    gap_ratio: float


def jacobi_eigh(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a batch of symmetric 4x4 matrices.

    Returns (values, vectors) with values (..., 4) ascending and vectors
    (..., 4, 4) holding the matching eigenvectors as columns.
    """
    a = np.array(mats, dtype=np.float64, copy=True)
    single = a.ndim == 2
    if single:
        a = a[None]
    m, n, n2 = a.shape
    if n != 4 or n2 != 4:
        raise ValueError(f"expected (..., 4, 4) matrices, got {mats.shape}")

    v = np.broadcast_to(np.eye(4), a.shape).copy()
    norm = np.sqrt((a * a).sum(axis=(1, 2)))
    tol = _CONV_FACTOR * norm

    pairs = [(p, q) for p in range(4) for q in range(p + 1, 4)]
    for _ in range(_SWEEP_LIMIT):
        off = np.sqrt(2.0 * (a[:, [0, 0, 0, 1, 1, 2], [1, 2, 3, 2, 3, 3]] ** 2).sum(axis=1))
        active = off > tol
        if not active.any():
            break
        for p, q in pairs:
            apq = a[:, p, q]
            rotate = active & (apq != 0.0)
            if not rotate.any():
                continue
            app = a[rotate, p, p]
            aqq = a[rotate, q, q]
            apq_r = apq[rotate]
            tau = (aqq - app) / (2.0 * apq_r)
            t = np.sign(tau)
            t = np.where(t == 0.0, 1.0, t)
            t = t / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            akp = a[rotate][:, :, p]
            akq = a[rotate][:, :, q]
            idx = np.where(rotate)[0]
            a[idx, :, p] = c[:, None] * akp - s[:, None] * akq
            a[idx, :, q] = s[:, None] * akp + c[:, None] * akq
            apk = a[idx][:, p, :]
            aqk = a[idx][:, q, :]
            a[idx, p, :] = c[:, None] * apk - s[:, None] * aqk
            a[idx, q, :] = s[:, None] * apk + c[:, None] * aqk
            vkp = v[idx][:, :, p]
            vkq = v[idx][:, :, q]
            v[idx, :, p] = c[:, None] * vkp - s[:, None] * vkq
            v[idx, :, q] = s[:, None] * vkp + c[:, None] * vkq

    vals = a[:, [0, 1, 2, 3], [0, 1, 2, 3]]
    order = np.argsort(vals, axis=1, kind="stable")
    vals = np.take_along_axis(vals, order, axis=1)
    vecs = np.take_along_axis(v, order[:, None, :], axis=2)
    if single:
        return vals[0], vecs[0]
    return vals, vecs


def smallest_eigenvector(cov: np.ndarray) -> EigenResult:
    """Smallest eigenpair of a symmetric 4x4 matrix.

    The matrix must be symmetric to within 1e-9 (relative) and finite.
    When the smallest eigenvalue is tied within rounding, the eigenvector
    with the largest temporal component among the tied basis is returned so
    repeated runs stay reproducible on degenerate geometry.
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got {cov.shape}")
    if not np.isfinite(cov).all():
        raise NumericalError("covariance contains non-finite entries")
    scale = max(1.0, float(np.abs(cov).max()))
    asym = float(np.abs(cov - cov.T).max())
    if asym > 1e-9 * scale:
        raise NumericalError(f"matrix asymmetry {asym:.3e} exceeds tolerance")
    sym = 0.5 * (cov + cov.T)

    vals, vecs = jacobi_eigh(sym)
    norm = float(np.linalg.norm(sym))
    tie_tol = _TIE_FACTOR * max(norm, np.finfo(np.float64).tiny)
    tied = np.where(vals <= vals[0] + tie_tol)[0]
    best = tied[int(np.argmax(np.abs(vecs[3, tied])))]
    vec = vecs[:, best].copy()
    vec /= np.linalg.norm(vec)
    denom = max(float(vals[0]), np.finfo(np.float64).tiny)
    with np.errstate(over="ignore"):
        gap = float(np.float64(vals[1]) / denom)
    return EigenResult(eigenvalue=float(vals[best]), eigenvector=vec, gap_ratio=gap)

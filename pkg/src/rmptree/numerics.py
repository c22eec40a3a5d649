"""Small dense-matrix utilities shared by all modules.

Everything here operates on plain ``numpy`` arrays: vectors are 1-D
``float64`` arrays, matrices are 2-D.  All public entry points refuse
NaN/Inf so that non-finite values never enter the policy algebra.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DimensionError, NumericError

DEFAULT_TOL = 1e-10


def as_vector(v, dim: int | None = None, name: str = "vector") -> np.ndarray:
    """Validate and convert to a finite 1-D float array."""
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1:
        raise DimensionError(f"{name}: expected 1-D array, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionError(f"{name}: expected dim {dim}, got {arr.shape[0]}")
    if not np.isfinite(arr).all():
        raise NumericError(f"{name}: non-finite entries")
    return arr


def as_matrix(m, shape: tuple[int, int] | None = None, name: str = "matrix") -> np.ndarray:
    """Validate and convert to a finite 2-D float array."""
    arr = np.asarray(m, dtype=float)
    if arr.ndim != 2:
        raise DimensionError(f"{name}: expected 2-D array, got shape {arr.shape}")
    if shape is not None and arr.shape != shape:
        raise DimensionError(f"{name}: expected shape {shape}, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericError(f"{name}: non-finite entries")
    return arr


def _require_square(M: np.ndarray, name: str) -> None:
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"{name}: expected square matrix, got shape {M.shape}")


def is_symmetric(M: np.ndarray, tol: float = DEFAULT_TOL) -> bool:
    scale = max(1.0, float(np.abs(M).max(initial=0.0)))
    return bool(np.abs(M - M.T).max(initial=0.0) <= tol * scale)


def pseudo_inverse(M, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Moore-Penrose inverse of a symmetric matrix via eigendecomposition.

    Eigenvalues with magnitude <= tol * max|eigenvalue| are truncated to
    zero.  All matrices resolved by the tree algebra are symmetric by
    construction (sums of J^T M J terms), so the symmetric-eigenvalue
    route is used instead of a general SVD.
    """
    M = as_matrix(M, name="pseudo_inverse input")
    _require_square(M, "pseudo_inverse")
    if not is_symmetric(M, max(tol, 1e-8)):
        raise DimensionError("pseudo_inverse: input is not symmetric within tolerance")
    evals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    return _pinv_from_eig(evals, vecs, tol)


def _pinv_from_eig(evals: np.ndarray, vecs: np.ndarray, tol: float) -> np.ndarray:
    cutoff = tol * max(float(np.abs(evals).max(initial=0.0)), 0.0)
    inv = np.where(np.abs(evals) > cutoff, 1.0 / np.where(evals == 0.0, 1.0, evals), 0.0)
    return (vecs * inv) @ vecs.T


def is_psd(M, tol: float = DEFAULT_TOL) -> bool:
    """True iff M is symmetric within tol and min eigenvalue >= -tol."""
    M = as_matrix(M, name="is_psd input")
    _require_square(M, "is_psd")
    if not is_symmetric(M, tol):
        return False
    if M.shape[0] == 0:
        return True
    return bool(np.linalg.eigvalsh(0.5 * (M + M.T)).min() >= -tol)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, (f(x+h e_i) - f(x-h e_i)) / 2h."""
    x = as_vector(x, name="finite_diff_grad point")
    if h <= 0.0:
        raise NumericError(f"finite_diff_grad: step must be positive, got {h}")
    g = np.empty_like(x)
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = h
        hi, lo = float(f(x + e)), float(f(x - e))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"finite_diff_grad: non-finite value near coordinate {i}")
        g[i] = (hi - lo) / (2.0 * h)
    return g


def finite_diff_jacobian(f: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a vector function (out_dim x in_dim)."""
    x = as_vector(x, name="finite_diff_jacobian point")
    if h <= 0.0:
        raise NumericError(f"finite_diff_jacobian: step must be positive, got {h}")
    cols = []
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = h
        hi = np.asarray(f(x + e), dtype=float)
        lo = np.asarray(f(x - e), dtype=float)
        if not (np.isfinite(hi).all() and np.isfinite(lo).all()):
            raise NumericError(f"finite_diff_jacobian: non-finite value near coordinate {i}")
        cols.append((hi - lo) / (2.0 * h))
    return np.stack(cols, axis=-1)

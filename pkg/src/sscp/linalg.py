"""Small complex linear-algebra helpers used throughout the package."""

import numpy as np

from .errors import NumericalError


def herm(a: np.ndarray) -> np.ndarray:
    """Symmetrize a nearly-Hermitian matrix (kills rounding asymmetry)."""
    return 0.5 * (a + a.conj().T)


def is_hermitian(a: np.ndarray, tol: float = 1e-9) -> bool:
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    return bool(np.abs(a - a.conj().T).max(initial=0.0) <= tol * scale)


def psd_sqrt(a: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Hermitian PSD square root via eigendecomposition.

    Eigenvalues in [-tol*lam_max, 0) are clamped to zero; anything more
    negative raises, since the input is then not a covariance matrix.
    """
    w, v = np.linalg.eigh(herm(a))
    lam_max = float(w[-1]) if w.size else 0.0
    if lam_max <= 0.0:
        if np.abs(a).max(initial=0.0) <= 1e-300:
            return np.zeros_like(a)
        lam_max = max(lam_max, np.abs(w).max())
    if w[0] < -tol * max(lam_max, 1e-300):
        raise NumericalError(
            f"matrix is not PSD within tolerance (min eig {w[0]:.3e}, max {lam_max:.3e})"
        )
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.conj().T


def effective_rank(a: np.ndarray, rel_tol: float = 1e-6) -> int:
    """Count of eigenvalues above rel_tol times the largest one."""
    w = np.linalg.eigvalsh(herm(a))
    lam_max = float(w[-1]) if w.size else 0.0
    if lam_max <= 0.0:
        return 0
    return int(np.sum(w >= rel_tol * lam_max))


def complex_gaussian(rng: np.random.Generator, *shape: int) -> np.ndarray:
    """I.i.d. standard complex Gaussian, unit variance per entry."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def orthonormal_columns(a: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of the column span of ``a`` (SVD-based, rank-revealing)."""
    if a.size == 0:
        return np.zeros((a.shape[0], 0), dtype=complex)
    u, s, _ = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[0] <= 0.0:
        return np.zeros((a.shape[0], 0), dtype=complex)
    r = int(np.sum(s > tol * s[0]))
    return u[:, :r]


def nullspace_projector(columns: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Projector onto the orthogonal complement of span(columns)."""
    m = columns.shape[0]
    q = orthonormal_columns(columns, tol=tol)
    return np.eye(m, dtype=complex) - q @ q.conj().T


def top_eigvecs(a: np.ndarray, count: int) -> np.ndarray:
    """Eigenvectors of the ``count`` largest eigenvalues of a Hermitian matrix."""
    w, v = np.linalg.eigh(herm(a))
    return v[:, ::-1][:, :count]

"""Pure-numpy kernel backend.

Mirrors the API of the compiled extension ``ilc.kernels._cyk``.  The
eigensolver delegates to LAPACK via ``numpy.linalg.eigh`` and then applies
the same deterministic ordering and phase conventions as the compiled
cyclic-Jacobi kernel:

* eigenvalues ascending,
* eigenvalues closer than ``cluster_tol`` form a cluster whose columns are
  ordered by the index of their dominant component,
* each eigenvector is rescaled so its largest-magnitude entry is real and
  positive (near-ties in magnitude resolved toward the lowest index).
"""
from __future__ import annotations

import numpy as np

from ..errors import EigenSolverError, FrameMatchingError

NAME = "pure"

CLUSTER_TOL = 1e-9
_TIE_REL = 1e-12


def _dominant_indices(V: np.ndarray) -> np.ndarray:
    """Per column: lowest index whose magnitude ties the maximum."""
    mags = V.real**2 + V.imag**2
    top = mags.max(axis=0)
    return np.argmax(mags >= top * (1.0 - 2.0 * _TIE_REL), axis=0)


def eigh(A: np.ndarray, cluster_tol: float = CLUSTER_TOL):
    """Eigendecomposition of a Hermitian matrix with fixed conventions."""
    try:
        w, V = np.linalg.eigh(A)
    except np.linalg.LinAlgError as exc:
        raise EigenSolverError(f"eigensolver did not converge: {exc}") from exc
    n = w.shape[0]
    # within-cluster ordering by dominant component index
    if n > 1 and np.min(np.diff(w)) <= cluster_tol:
        i = 0
        while i < n:
            j = i + 1
            while j < n and w[j] - w[j - 1] <= cluster_tol:
                j += 1
            if j - i > 1:
                dom = _dominant_indices(V[:, i:j])
                order = i + np.argsort(dom, kind="stable")
                w[i:j] = w[order]
                V[:, i:j] = V[:, order]
            i = j
    # phase convention
    dom = _dominant_indices(V)
    z = V[dom, np.arange(n)]
    az = np.abs(z)
    scale = np.where(az > 0.0, np.conj(z) / np.where(az > 0.0, az, 1.0), 1.0)
    return w, np.ascontiguousarray(V * scale)


def match_frame(ref: np.ndarray, w: np.ndarray, V: np.ndarray,
                ambiguity_tol: float = 1e-6):
    """Reorder eigenpairs so column j maximizes overlap with ``ref[:, j]``.

    Raises ``FrameMatchingError`` when the best and runner-up overlaps for
    some reference column are closer than ``ambiguity_tol`` or when two
    reference columns claim the same eigenvector.
    """
    n = w.shape[0]
    overlap = np.abs(ref.conj().T @ V)
    perm = np.empty(n, dtype=np.intp)
    for j in range(n):
        row = overlap[j]
        best = int(np.argmax(row))
        if n > 1:
            runner = np.max(np.delete(row, best))
            if row[best] - runner < ambiguity_tol:
                raise FrameMatchingError(
                    f"ambiguous eigenbranch for reference column {j}: "
                    f"overlaps {row[best]:.9f} and {runner:.9f}")
        perm[j] = best
    if len(set(perm.tolist())) != n:
        raise FrameMatchingError(
            f"eigenbranch crossing: column assignment {perm.tolist()} "
            "is not a permutation")
    return w[perm].copy(), V[:, perm].copy()


def dressed_frame(H_eta: np.ndarray, H_gsum: np.ndarray, g: float, ref,
                  cluster_tol: float = CLUSTER_TOL,
                  ambiguity_tol: float = 1e-6):
    """Eigenframe of ``H_eta + g * H_gsum``, matched to ``ref`` if given."""
    w, V = eigh(H_eta + g * H_gsum, cluster_tol)
    if ref is None:
        return w, V
    return match_frame(ref, w, V, ambiguity_tol)


def weighted_projector(V: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Sum of vals[j] * |v_j><v_j| over the columns of V."""
    return (V * vals) @ V.conj().T


def evolve_pure(w: np.ndarray, V: np.ndarray, dt: float,
                psi: np.ndarray) -> np.ndarray:
    """Apply exp(-i H dt) with H = V diag(w) V^dagger to a state vector."""
    phases = np.exp(-1j * dt * w)
    return (V * phases) @ (V.conj().T @ psi)


def evolve_density(w: np.ndarray, V: np.ndarray, dt: float,
                   rho: np.ndarray) -> np.ndarray:
    """Conjugate a density matrix by exp(-i H dt)."""
    phases = np.exp(-1j * dt * w)
    U = V * phases
    return U @ (V.conj().T @ rho @ V) @ U.conj().T


def expect_pure(A: np.ndarray, psi: np.ndarray) -> complex:
    """<psi|A|psi> without assuming Hermiticity of A."""
    return complex(psi.conj() @ (A @ psi))


def expect_density(A: np.ndarray, rho: np.ndarray) -> complex:
    """tr(A rho) without assuming Hermiticity."""
    return complex(np.sum(A.T * rho))


def comm_expect_pure(H: np.ndarray, P: np.ndarray, psi: np.ndarray) -> complex:
    """<psi|[H, P]|psi>, purely imaginary for Hermitian H, P."""
    return complex(psi.conj() @ (H @ (P @ psi)) - psi.conj() @ (P @ (H @ psi)))


def comm_expect_density(H: np.ndarray, P: np.ndarray,
                        rho: np.ndarray) -> complex:
    """tr([P, H] rho), purely imaginary for Hermitian P, H, rho."""
    return complex(np.sum((P @ H).T * rho) - np.sum((H @ P).T * rho))

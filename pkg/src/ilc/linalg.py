"""Complex Hermitian linear algebra with deterministic conventions.

All operators and states are plain complex128 ndarrays.  A state vector is a
1-d array, a density matrix a 2-d array; functions dispatch on ``ndim``.
Validation helpers enforce the construction invariants at API boundaries,
the numerical work is delegated to the active kernel backend.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import (
    DimensionMismatchError,
    InvalidStateError,
    NotHermitianError,
)
from .kernels import active as _k

HERMITIAN_TOL = 1e-12
NORM_TOL = 1e-10
TRACE_TOL = 1e-10
EIGENVALUE_FLOOR = -1e-10
IMAG_RESIDUE_TOL = 1e-10


class EigenDecomposition(NamedTuple):
    """Eigenvalues ascending; column j of ``eigenvectors`` pairs with j."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def as_complex_matrix(M, name: str = "matrix") -> np.ndarray:
    arr = np.ascontiguousarray(M, dtype=np.complex128)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DimensionMismatchError(f"{name} must be square, got {arr.shape}")
    if not np.all(np.isfinite(arr.view(np.float64))):
        raise InvalidStateError(f"{name} has non-finite entries")
    return arr


def hermitian_defect(M: np.ndarray) -> float:
    """Max-norm of M - M^dagger."""
    return float(np.max(np.abs(M - M.conj().T))) if M.size else 0.0


def as_hermitian(M, tol: float = HERMITIAN_TOL,
                 name: str = "operator") -> np.ndarray:
    """Validate an operator as Hermitian within ``tol`` and return it."""
    arr = as_complex_matrix(M, name)
    defect = hermitian_defect(arr)
    if defect > tol:
        raise NotHermitianError(
            f"{name} is not Hermitian: max |M - M^H| = {defect:.3e} > {tol:.0e}")
    return arr


def as_pure_state(psi, tol: float = NORM_TOL, name: str = "state") -> np.ndarray:
    arr = np.ascontiguousarray(psi, dtype=np.complex128)
    if arr.ndim != 1:
        raise InvalidStateError(f"{name} must be a vector, got shape {arr.shape}")
    norm = float(np.linalg.norm(arr))
    if abs(norm - 1.0) > tol:
        raise InvalidStateError(f"{name} is not normalized: ||psi|| = {norm!r}")
    return arr


def as_density_matrix(rho, name: str = "state") -> np.ndarray:
    arr = as_hermitian(rho, tol=HERMITIAN_TOL, name=name)
    tr = float(np.trace(arr).real)
    if abs(tr - 1.0) > TRACE_TOL:
        raise InvalidStateError(f"{name} trace is {tr!r}, expected 1")
    evals = np.linalg.eigvalsh(arr)
    if evals.min() < EIGENVALUE_FLOOR:
        raise InvalidStateError(
            f"{name} has negative eigenvalue {evals.min():.3e}")
    return arr


def is_density(state: np.ndarray) -> bool:
    return np.asarray(state).ndim == 2


def eig_hermitian(A, check: bool = True) -> EigenDecomposition:
    """Eigendecomposition with ascending eigenvalues and fixed phases.

    Deterministic for identical input: eigenvalue clusters (within 1e-9) are
    ordered by each eigenvector's dominant component index, and every column
    is scaled so its largest-magnitude entry is real positive.
    """
    if check:
        A = as_hermitian(A)
    w, V = _k.eigh(A)
    return EigenDecomposition(w, V)


def commutator(A, B) -> np.ndarray:
    """AB - BA; anti-Hermitian for Hermitian inputs."""
    A = np.asarray(A, dtype=np.complex128)
    B = np.asarray(B, dtype=np.complex128)
    if A.shape != B.shape:
        raise DimensionMismatchError(
            f"commutator shapes differ: {A.shape} vs {B.shape}")
    return A @ B - B @ A


def expectation(A, state) -> float:
    """<psi|A|psi> or tr(A rho); raises if the imaginary residue betrays a
    non-Hermitian argument."""
    state = np.asarray(state, dtype=np.complex128)
    if is_density(state):
        val = _k.expect_density(A, state)
    else:
        val = _k.expect_pure(A, state)
    if abs(val.imag) > IMAG_RESIDUE_TOL:
        raise NotHermitianError(
            f"expectation has imaginary residue {val.imag:.3e}; "
            "operator or state is not Hermitian")
    return float(val.real)


def propagate_step(H_total, dt: float, state):
    """Advance a state by exp(-i H dt) (unitary, piecewise-constant H).

    Pure states keep their norm to ~1e-15 per step, density matrices keep
    trace and spectrum, because the exponential is taken through the
    eigendecomposition of ``H_total``.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    H_total = as_hermitian(H_total, name="H_total")
    state = np.asarray(state, dtype=np.complex128)
    if is_density(state):
        if state.shape[0] != H_total.shape[0]:
            raise DimensionMismatchError("state/H dimension mismatch")
        if hermitian_defect(state) > HERMITIAN_TOL:
            raise InvalidStateError("density matrix drifted off Hermitian")
        tr = float(np.trace(state).real)
        if abs(tr - 1.0) > TRACE_TOL:
            raise InvalidStateError(f"density matrix trace drifted to {tr!r}")
        w, V = _k.eigh(H_total)
        return _k.evolve_density(w, V, dt, state)
    if state.shape[0] != H_total.shape[0]:
        raise DimensionMismatchError("state/H dimension mismatch")
    norm = float(np.linalg.norm(state))
    if abs(norm - 1.0) > NORM_TOL:
        raise InvalidStateError(f"state norm drifted to {norm!r}")
    w, V = _k.eigh(H_total)
    return _k.evolve_pure(w, V, dt, state)


def fidelity(state, target) -> float:
    """|<target|state>|^2 for vectors, tr(rho_target rho) for densities."""
    state = np.asarray(state, dtype=np.complex128)
    target = np.asarray(target, dtype=np.complex128)
    if state.ndim != target.ndim:
        raise DimensionMismatchError("state kinds differ (vector vs matrix)")
    if state.shape != target.shape:
        raise DimensionMismatchError(
            f"state shapes differ: {state.shape} vs {target.shape}")
    if is_density(state):
        return float(np.sum(target.T * state).real)
    return float(abs(np.vdot(target, state)) ** 2)

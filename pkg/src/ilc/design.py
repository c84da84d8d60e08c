"""Degeneracy detection and design of the constant offsets and spectrum.

The design steps turn an arbitrary target into one the feedback can reach:
constant channel offsets ``eta`` make the target stationary under the
dressed drift, and the spectrum designer picks the weights so the target
attains the strictly smallest Lyapunov value on the limit set.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DesignError, InvalidStateError
from .kernels import active as _k
from .linalg import as_hermitian, is_density
from .system import ControlSystem

DEGENERACY_TOL = 1e-9
SPECTRUM_BASE = 0.1
SPECTRUM_SPACING = 0.3
_DISTINCT_TOL = 1e-12


@dataclass(frozen=True)
class SpectrumSpec:
    """Weights of the designed observable, bound by position.

    ``values[j]`` is assigned to the j-th eigendirection of the dressed
    drift at gamma = 0 (reference ordering: ascending eigenvalue).
    """

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).copy()
        if vals.ndim != 1 or vals.size == 0:
            raise InvalidStateError("spectrum must be a non-empty vector")
        if vals.min() <= 0:
            raise InvalidStateError(
                f"spectrum values must be positive, got min {vals.min()!r}")
        scale = max(1.0, float(vals.max()))
        srt = np.sort(vals)
        if vals.size > 1 and np.min(np.diff(srt)) <= _DISTINCT_TOL * scale:
            raise InvalidStateError("spectrum values must be pairwise distinct")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class DegeneracyReport:
    """Which level pairs the controls couple in the dressed eigenbasis.

    Level pairs are 1-based ``(l, m)`` with ``l < m``.  ``ill_conditioned``
    flags a dressed drift with (near-)degenerate eigenvalues, where the
    eigenbasis and hence the connectivity statement is unreliable.
    """

    strongly_regular: bool
    connected_pairs: frozenset = field(default_factory=frozenset)
    missing_pairs: frozenset = field(default_factory=frozenset)
    transition_frequencies: dict = field(default_factory=dict)
    ill_conditioned: bool = False

    @property
    def fully_connected(self) -> bool:
        return not self.missing_pairs


@dataclass(frozen=True)
class EtaDesign:
    """Designed constant offsets and the residual they achieve."""

    eta: np.ndarray
    residual: float


def check_strong_regularity(H, tol: float = DEGENERACY_TOL):
    """True iff all transition frequencies of H are pairwise distinct.

    Returns the flag and the frequency table over ordered 1-based pairs.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    H = as_hermitian(H, name="H")
    w, _ = _k.eigh(H)
    n = w.shape[0]
    freqs = {}
    for l in range(n):
        for m in range(n):
            if l != m:
                freqs[(l + 1, m + 1)] = float(w[l] - w[m])
    vals = sorted(freqs.values())
    regular = all(b - a > tol for a, b in zip(vals, vals[1:]))
    return regular, freqs


def check_full_connectedness(system: ControlSystem, gamma: float,
                             tol: float = DEGENERACY_TOL) -> DegeneracyReport:
    """Report which level pairs are coupled by some control Hamiltonian in
    the eigenbasis of the dressed drift at the given gamma."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    drift = system.drift_eta + gamma * system.gamma_coupling
    w, V = _k.eigh(drift)
    n = system.dim
    gaps = np.diff(w)
    ill = bool(n > 1 and gaps.min() <= _k.CLUSTER_TOL)
    regular, freqs = check_strong_regularity(drift, tol=max(tol, 1e-12))
    connected = set()
    for ch in system.channels:
        Hk_hat = V.conj().T @ ch.H @ V
        for l in range(n - 1):
            for m in range(l + 1, n):
                if abs(Hk_hat[l, m]) > tol:
                    connected.add((l + 1, m + 1))
    all_pairs = {(l + 1, m + 1) for l in range(n - 1) for m in range(l + 1, n)}
    return DegeneracyReport(
        strongly_regular=regular,
        connected_pairs=frozenset(connected),
        missing_pairs=frozenset(all_pairs - connected),
        transition_frequencies=freqs,
        ill_conditioned=ill,
    )


def design_eta(system: ControlSystem, target, tol: float = 1e-8) -> EtaDesign:
    """Constant offsets making the target stationary under the dressed drift.

    Pure target: least-squares minimization of the component of
    ``(H0 + sum eta_k H_k)|psi>`` orthogonal to ``|psi>`` (the residual is
    affine in eta).  Density target: minimization of the Frobenius norm of
    ``[H0 + sum eta_k H_k, rho]``.  Channel offsets already stored on the
    system are ignored; the design starts from the bare drift.

    Raises ``DesignError`` when the best residual is not below ``tol``.
    """
    target = np.asarray(target, dtype=np.complex128)
    r = system.n_channels
    if is_density(target):
        b = commutator_vec(system.H0, target)
        cols = [commutator_vec(ch.H, target) for ch in system.channels]
    else:
        proj = np.eye(system.dim) - np.outer(target, target.conj())
        b = proj @ (system.H0 @ target)
        cols = [proj @ (ch.H @ target) for ch in system.channels]
    A = np.column_stack(cols)
    A_real = np.vstack([A.real, A.imag])
    b_real = np.concatenate([b.real, b.imag])
    eta, *_ = np.linalg.lstsq(A_real, -b_real, rcond=None)
    residual = float(np.linalg.norm(A_real @ eta + b_real))
    if residual >= tol:
        raise DesignError(
            "target not reachable as a dressed eigenstate with the available "
            f"channels: residual {residual:.3e} >= {tol:.0e}",
            residual=residual)
    return EtaDesign(eta=eta, residual=residual)


def commutator_vec(H, rho) -> np.ndarray:
    """Flattened [H, rho], the linear map behind the density eta design."""
    return (H @ rho - rho @ H).ravel()


def _ladder(n: int, base: float, spacing: float) -> np.ndarray:
    return base + spacing * np.arange(n)


def design_spectrum_pure(target_index: int, N: int,
                         base: float = SPECTRUM_BASE,
                         spacing: float = SPECTRUM_SPACING) -> SpectrumSpec:
    """Distinct positive weights with the target direction strictly smallest.

    Default ladder: target gets ``base``, the other directions get
    ``base + spacing * j`` in ascending direction order.
    """
    if not 0 <= target_index < N:
        raise InvalidStateError(
            f"target index {target_index} outside 0..{N - 1}")
    ladder = _ladder(N, base, spacing)
    values = np.empty(N)
    values[target_index] = ladder[0]
    others = [j for j in range(N) if j != target_index]
    values[others] = ladder[1:]
    return SpectrumSpec(values)


def design_spectrum_density(target, frame,
                            base: float = SPECTRUM_BASE,
                            spacing: float = SPECTRUM_SPACING,
                            diag_tol: float = 1e-8) -> SpectrumSpec:
    """Weights ordered strictly inversely to the target populations.

    ``target`` must be diagonal in the frame basis within ``diag_tol``
    (run the eta design first otherwise).  Equal populations get distinct
    values, tie-broken by direction index.
    """
    rho = np.asarray(target, dtype=np.complex128)
    basis = frame.basis if hasattr(frame, "basis") else np.asarray(frame)
    rho_t = basis.conj().T @ rho @ basis
    off = rho_t - np.diag(np.diag(rho_t))
    if rho_t.shape[0] > 1 and np.max(np.abs(off)) > diag_tol:
        raise DesignError(
            "target is not diagonal in the dressed eigenbasis "
            f"(max off-diagonal {np.max(np.abs(off)):.3e}); design eta first")
    pops = np.diag(rho_t).real
    n = pops.shape[0]
    ladder = _ladder(n, base, spacing)
    order = np.argsort(-pops, kind="stable")
    values = np.empty(n)
    values[order] = ladder
    return SpectrumSpec(values)

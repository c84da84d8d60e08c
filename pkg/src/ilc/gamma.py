"""Implicit perturbation machinery.

The designed observable is built from the eigenframe of the dressed drift,
so it commutes with the drift at every perturbation amplitude.  The
amplitude itself is defined implicitly as the fixed point of

    gamma = theta(V_gamma(state) - V_gamma(target))

which the slope bound of ``validate_theta`` turns into a contraction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import SpectrumSpec
from .errors import GammaSolverError, InvalidStateError
from .kernels import active as _k
from .linalg import is_density
from .system import ControlSystem

GAMMA_TOL = 1e-12
MAX_GAMMA_ITER = 200
_FIXED_POINT_BUDGET = 60  # iterations before the bisection fallback
DP_STEP = 1e-6
AMBIGUITY_TOL = 1e-6


@dataclass(frozen=True)
class ThetaSpec:
    """Monotone amplitude map: linear with slope ``slope``, clamped to
    [0, gamma_max]."""

    slope: float
    gamma_max: float
    kind: str = "linear_clamped"

    def __post_init__(self):
        if self.kind != "linear_clamped":
            raise InvalidStateError(f"unknown theta kind {self.kind!r}")
        if not self.slope > 0:
            raise InvalidStateError("theta slope must be positive")
        if not self.gamma_max > 0:
            raise InvalidStateError("gamma_max must be positive")

    def __call__(self, s: float) -> float:
        if s <= 0.0:
            return 0.0
        return min(self.slope * s, self.gamma_max)

    def derivative(self, s: float) -> float:
        """Slope at s; zero on the clamped branches."""
        if s <= 0.0 or self.slope * s >= self.gamma_max:
            return 0.0
        return self.slope


@dataclass(frozen=True)
class EigenFrame:
    """Eigenbasis of the dressed drift at one perturbation amplitude.

    Column order is continuity-tracked: column j has maximal overlap with
    column j of the reference frame at gamma = 0 (ascending eigenvalues).
    """

    gamma: float
    eigenvalues: np.ndarray
    basis: np.ndarray

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]

    def frequencies(self) -> np.ndarray:
        """Transition frequency matrix w[l, m] = lambda_l - lambda_m."""
        w = self.eigenvalues
        return w[:, None] - w[None, :]

    def overlaps(self, state: np.ndarray) -> np.ndarray:
        """Squared overlap of a state vector with each basis column."""
        return np.abs(self.basis.conj().T @ state) ** 2


@dataclass(frozen=True)
class MechanicalQuantity:
    """The designed observable: spectrum values on the frame's directions."""

    P: np.ndarray
    frame: EigenFrame
    spectrum: SpectrumSpec


@dataclass(frozen=True)
class GammaSolution:
    """Fixed point of the implicit amplitude equation at one state."""

    gamma: float
    residual: float
    iterations: int
    P_at_gamma: MechanicalQuantity
    V: float
    V_f: float


@dataclass(frozen=True)
class ThetaValidation:
    """Estimated sensitivity of the observable and the slope bound."""

    C: float
    C_star: float
    slope_bound: float
    valid: bool


def dressed_drift(system: ControlSystem, gamma: float) -> np.ndarray:
    """H0 + sum_k eta_k H_k + gamma * (sum of gamma-channel H_n)."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    return system.drift_eta + gamma * system.gamma_coupling


class GammaEngine:
    """Caches the drift decomposition pieces for repeated gamma solves.

    One engine serves one (system, spectrum, theta, target) tuple; the
    closed-loop simulator keeps it across steps for warm-started solving.
    """

    def __init__(self, system: ControlSystem, theta: ThetaSpec,
                 spectrum: SpectrumSpec, target=None,
                 ambiguity_tol: float = AMBIGUITY_TOL):
        if spectrum.dim != system.dim:
            raise InvalidStateError(
                f"spectrum has {spectrum.dim} values for dim {system.dim}")
        self.system = system
        self.theta = theta
        self.spectrum = spectrum
        self.ambiguity_tol = ambiguity_tol
        self.H_eta = np.ascontiguousarray(system.drift_eta)
        self.H_gsum = np.ascontiguousarray(system.gamma_coupling)
        self.values = np.ascontiguousarray(spectrum.values)
        self.ref = _k.dressed_frame(self.H_eta, self.H_gsum, 0.0, None)
        self.target = None
        self.target_is_density = False
        if target is not None:
            self.target = np.ascontiguousarray(target, dtype=np.complex128)
            self.target_is_density = is_density(self.target)

    def frame_raw(self, gamma: float):
        if gamma == 0.0:
            return self.ref
        return _k.dressed_frame(self.H_eta, self.H_gsum, gamma, self.ref[1],
                                _k.CLUSTER_TOL, self.ambiguity_tol)

    def P_raw(self, gamma: float) -> np.ndarray:
        _, V = self.frame_raw(gamma)
        return _k.weighted_projector(V, self.values)

    def value(self, P: np.ndarray, state: np.ndarray) -> float:
        if state.ndim == 2:
            return _k.expect_density(P, state).real
        return _k.expect_pure(P, state).real

    def solve(self, state, warm_start: float = 0.0,
              tol: float = GAMMA_TOL, max_iter: int = MAX_GAMMA_ITER):
        """Fixed point of g = theta(V_g(state) - V_g(target)).

        Returns (gamma, residual, iterations, P, V, V_f) with P, V, V_f
        evaluated at the returned gamma.
        """
        if self.target is None:
            raise GammaSolverError("engine has no target state")
        state = np.ascontiguousarray(state, dtype=np.complex128)
        theta = self.theta
        g = min(max(warm_start, 0.0), theta.gamma_max)
        evals = 0
        while evals < min(_FIXED_POINT_BUDGET, max_iter):
            P = self.P_raw(g)
            vs = self.value(P, state)
            vf = self.value(P, self.target)
            g_new = theta(vs - vf)
            evals += 1
            if abs(g_new - g) <= tol:
                return g, abs(g_new - g), evals, P, vs, vf
            g = g_new
        # non-contraction fallback: bisect x - theta(V_x - V_f^x) on [0, g*]
        lo, hi = 0.0, theta.gamma_max
        while evals < max_iter:
            mid = 0.5 * (lo + hi)
            P = self.P_raw(mid)
            vs = self.value(P, state)
            vf = self.value(P, self.target)
            g_new = theta(vs - vf)
            evals += 1
            if abs(g_new - mid) <= tol:
                return mid, abs(g_new - mid), evals, P, vs, vf
            if g_new > mid:
                lo = mid
            else:
                hi = mid
        raise GammaSolverError(
            f"implicit amplitude solve did not converge in {max_iter} "
            "evaluations; the theta slope likely violates its bound")

    def dP(self, gamma: float, h: float = DP_STEP) -> np.ndarray:
        """Finite-difference derivative of the observable, one-sided at the
        ends of [0, gamma_max]."""
        gmax = self.theta.gamma_max
        lo = gamma - h
        hi = gamma + h
        if lo < 0.0:
            return (self.P_raw(gamma + h) - self.P_raw(gamma)) / h
        if hi > gmax:
            return (self.P_raw(gamma) - self.P_raw(gamma - h)) / h
        return (self.P_raw(hi) - self.P_raw(lo)) / (2.0 * h)


def build_frame(system: ControlSystem, gamma: float,
                reference: EigenFrame | None = None,
                ambiguity_tol: float = AMBIGUITY_TOL) -> EigenFrame:
    """Continuity-tracked eigenframe of the dressed drift.

    With no reference, gamma = 0 yields the canonical ascending-eigenvalue
    frame and any other gamma is matched against an internally built
    gamma = 0 frame.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    H_eta = system.drift_eta
    H_gsum = system.gamma_coupling
    if reference is None:
        if gamma == 0.0:
            w, V = _k.dressed_frame(H_eta, H_gsum, 0.0, None)
            return EigenFrame(0.0, w, V)
        ref = _k.dressed_frame(H_eta, H_gsum, 0.0, None)[1]
    else:
        ref = reference.basis
    w, V = _k.dressed_frame(H_eta, H_gsum, gamma, ref,
                            _k.CLUSTER_TOL, ambiguity_tol)
    return EigenFrame(gamma, w, V)


def build_P(frame: EigenFrame, spectrum: SpectrumSpec) -> MechanicalQuantity:
    """Assemble the observable from the frame and its spectrum values."""
    if spectrum.dim != frame.dim:
        raise InvalidStateError(
            f"spectrum has {spectrum.dim} values for frame dim {frame.dim}")
    P = _k.weighted_projector(frame.basis, spectrum.values)
    return MechanicalQuantity(P=P, frame=frame, spectrum=spectrum)


def lyapunov_value(P, state) -> float:
    """Expectation of the designed observable in the given state."""
    from .linalg import expectation

    mat = P.P if isinstance(P, MechanicalQuantity) else P
    return expectation(mat, state)


def validate_theta(theta: ThetaSpec, system: ControlSystem,
                   spectrum: SpectrumSpec, grid=None,
                   h: float = DP_STEP) -> ThetaValidation:
    """Estimate C = max ||dP/dgamma||_2 over the grid and check the slope.

    The admissible slope is 1 / (2 * (1 + C)); the observable's
    gamma-sensitivity is probed by central finite differences.
    """
    engine = GammaEngine(system, theta, spectrum)
    if grid is None:
        grid = np.linspace(0.0, theta.gamma_max, 9)
    grid = np.asarray(grid, dtype=float)
    if grid.min() < 0 or grid.max() > theta.gamma_max:
        raise ValueError("grid must lie within [0, gamma_max]")
    C = 0.0
    for g in grid:
        D = engine.dP(float(g), h)
        ws, _ = _k.eigh((D + D.conj().T) / 2)
        C = max(C, float(np.max(np.abs(ws))))
    C_star = 1.0 + C
    bound = 1.0 / (2.0 * C_star)
    return ThetaValidation(C=C, C_star=C_star, slope_bound=bound,
                           valid=theta.slope < bound)


def solve_gamma(system: ControlSystem, state, target, theta: ThetaSpec,
                spectrum: SpectrumSpec, warm_start: float = 0.0,
                tol: float = GAMMA_TOL,
                max_iter: int = MAX_GAMMA_ITER) -> GammaSolution:
    """Solve the implicit amplitude equation for one state."""
    engine = GammaEngine(system, theta, spectrum, target=target)
    g, residual, iterations, P, vs, vf = engine.solve(
        state, warm_start, tol, max_iter)
    w, V = engine.frame_raw(g)
    mq = MechanicalQuantity(P=P, frame=EigenFrame(g, w, V), spectrum=spectrum)
    return GammaSolution(gamma=g, residual=residual, iterations=iterations,
                         P_at_gamma=mq, V=vs, V_f=vf)


def dP_dgamma(system: ControlSystem, gamma: float, spectrum: SpectrumSpec,
              h: float = DP_STEP, gamma_max: float | None = None) -> np.ndarray:
    """Finite-difference derivative of the observable at one amplitude.

    ``gamma_max`` bounds the probe points from above (one-sided difference
    at the ends); unbounded above when omitted.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    theta = ThetaSpec(slope=1.0,
                      gamma_max=gamma_max if gamma_max is not None
                      else max(1.0, gamma + h))
    engine = GammaEngine(system, theta, spectrum)
    return engine.dP(gamma, h)

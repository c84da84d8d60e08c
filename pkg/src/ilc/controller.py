"""Feedback laws, the analytic Lyapunov derivative and the escape rule."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidStateError, NotHermitianError, ThetaBoundError
from .gamma import MechanicalQuantity, ThetaSpec
from .kernels import active as _k
from .linalg import is_density
from .system import ControlSystem

COMM_RESIDUE_TOL = 1e-10


@dataclass(frozen=True)
class FeedbackShape:
    """Monotone increasing shaping function through the origin.

    ``identity`` is the plain proportional law; ``scaled_tanh`` saturates at
    ``saturation`` with unit slope at the origin times ``scale``.
    """

    kind: str = "identity"
    scale: float = 1.0
    saturation: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "scaled_tanh"):
            raise InvalidStateError(f"unknown feedback shape {self.kind!r}")
        if self.scale <= 0 or self.saturation <= 0:
            raise InvalidStateError("shape parameters must be positive")

    def __call__(self, x: float) -> float:
        if self.kind == "identity":
            return x
        return self.saturation * math.tanh(self.scale * x / self.saturation)


@dataclass(frozen=True)
class EscapePolicy:
    """When and how hard to kick a trajectory off a stalled limit point.

    A stall is a full dwell window with all |v_k| below ``v_eps`` while the
    implicit amplitude stays above ``gamma_eps``; the kick replaces it by
    ``gamma * (1 - alpha_fraction)`` until the Lyapunov value has dropped by
    more than ``v_eps`` below its value at activation.
    """

    v_eps: float = 1e-6
    gamma_eps: float = 1e-6
    dwell: float = 1.0
    alpha_fraction: float = 0.5

    def __post_init__(self):
        if min(self.v_eps, self.gamma_eps, self.dwell) <= 0:
            raise InvalidStateError("escape thresholds must be positive")
        if not 0 < self.alpha_fraction < 1:
            raise InvalidStateError("alpha_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class ControlSample:
    """One step's control snapshot: u_k = eta_k + gamma*[k carries it] + v_k."""

    gamma: float
    v: np.ndarray
    u: np.ndarray
    V: float
    Vdot_analytic: float
    escape_active: bool = False


def _as_matrix(P) -> np.ndarray:
    return P.P if isinstance(P, MechanicalQuantity) else np.asarray(P)


def commutator_arguments(state, P, system: ControlSystem) -> np.ndarray:
    """Per channel: i<psi|[H_k, P]|psi> (pure) or i tr([P, H_k] rho).

    Mathematically real; raises when the residue betrays a non-Hermitian
    operator.
    """
    Pm = _as_matrix(P)
    state = np.ascontiguousarray(state, dtype=np.complex128)
    args = np.empty(system.n_channels)
    density = is_density(state)
    for k, ch in enumerate(system.channels):
        if density:
            c = _k.comm_expect_density(ch.H, Pm, state)  # tr([P, H_k] rho)
        else:
            c = _k.comm_expect_pure(ch.H, Pm, state)  # <[H_k, P]>
        if abs(c.real) > COMM_RESIDUE_TOL:
            raise NotHermitianError(
                f"channel {k}: commutator expectation has real residue "
                f"{c.real:.3e}; operator inputs are not Hermitian")
        args[k] = -c.imag  # Re(i * c)
    return args


def feedback_v(state, P, system: ControlSystem,
               shape: FeedbackShape = FeedbackShape()) -> np.ndarray:
    """Descent feedback per channel.

    Pure states: v_k = -K_k f_k(i<psi|[H_k, P]|psi>); densities:
    v_k = K_k f_k(i tr([P, H_k] rho)).  The two signs agree because
    [P, H] = -[H, P].
    """
    args = commutator_arguments(state, P, system)
    sign = 1.0 if is_density(np.asarray(state)) else -1.0
    return np.array([sign * ch.K * shape(a)
                     for ch, a in zip(system.channels, args)])


def vdot_analytic(state, target, system: ControlSystem,
                  theta: Optional[ThetaSpec], P, dPdg,
                  v: np.ndarray) -> float:
    """Lyapunov time derivative along the closed loop.

    Includes the implicit-amplitude prefactor
    ``(1 + theta' b) / (1 - theta' (a - b))`` with ``a``, ``b`` the
    state/target expectations of dP/dgamma.  Pass ``theta=None`` while the
    amplitude is externally held (escape override): the prefactor is 1.
    """
    Pm = _as_matrix(P)
    state = np.ascontiguousarray(state, dtype=np.complex128)
    target = np.ascontiguousarray(target, dtype=np.complex128)
    args = commutator_arguments(state, Pm, system)
    if is_density(state):
        drive = -float(np.dot(v, args))  # tr(P d rho/dt) = -sum v_k y_k
    else:
        drive = float(np.dot(v, args))
    if theta is None:
        return drive
    if is_density(state):
        a = _k.expect_density(dPdg, state).real
        b = _k.expect_density(dPdg, target).real
        V_s = _k.expect_density(Pm, state).real
        V_f = _k.expect_density(Pm, target).real
    else:
        a = _k.expect_pure(dPdg, state).real
        b = _k.expect_pure(dPdg, target).real
        V_s = _k.expect_pure(Pm, state).real
        V_f = _k.expect_pure(Pm, target).real
    tp = theta.derivative(V_s - V_f)
    denom = 1.0 - tp * (a - b)
    if denom <= 0.0:
        raise ThetaBoundError(
            f"implicit prefactor denominator {denom:.3e} <= 0; "
            "theta slope violates its bound")
    return drive * (1.0 + tp * b) / denom


def escape_check(history: Sequence[ControlSample], policy: EscapePolicy,
                 dt: float) -> Optional[float]:
    """Amplitude override when the trajectory has stalled for a full dwell.

    ``history`` must span at least ``policy.dwell`` of simulated time at
    step ``dt`` and hold the most recent samples, oldest first.  Returns the
    replacement amplitude ``gamma * (1 - alpha_fraction)`` or None.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    needed = int(round(policy.dwell / dt)) + 1
    if len(history) < needed:
        return None
    window = list(history)[-needed:]
    for sample in window:
        if sample.escape_active:
            return None
        if np.max(np.abs(sample.v)) >= policy.v_eps:
            return None
        if sample.gamma <= policy.gamma_eps:
            return None
    return window[-1].gamma * (1.0 - policy.alpha_fraction)

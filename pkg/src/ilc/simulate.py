"""Fixed-step closed-loop simulation and limit-set analysis."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .controller import (
    COMM_RESIDUE_TOL,
    ControlSample,
    EscapePolicy,
    FeedbackShape,
)
from .design import (
    SpectrumSpec,
    check_full_connectedness,
    check_strong_regularity,
)
from .errors import (
    DesignError,
    IlcError,
    NotHermitianError,
    SimulationError,
    ThetaBoundError,
)
from .gamma import GammaEngine, ThetaSpec, validate_theta
from .kernels import active as _k
from .linalg import as_density_matrix, as_pure_state, is_density
from .system import ControlSystem

log = logging.getLogger("ilc.simulate")

FIDELITY_STOP = 1.0 - 1e-6
COMMUTE_TOL = 1e-10
DRESSING_TOL = 1e-8


@dataclass(frozen=True)
class SimulationConfig:
    """Step size and horizon in atomic units; recording stride."""

    dt: float = 0.01
    t_final: float = 300.0
    equation: str = "schrodinger"
    record_stride: int = 1

    def __post_init__(self):
        if self.dt <= 0:
            raise SimulationError(f"dt must be positive, got {self.dt}")
        if self.t_final < self.dt:
            raise SimulationError("t_final must be at least one step")
        if self.equation not in ("schrodinger", "liouville"):
            raise SimulationError(f"unknown equation {self.equation!r}")
        if self.record_stride < 1:
            raise SimulationError("record_stride must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))


@dataclass
class TrajectoryRecord:
    """Recorded time series of one closed-loop run.

    Column arrays are aligned with ``times``; ``escape`` marks steps whose
    controls used the override amplitude instead of the implicit solve.
    """

    times: np.ndarray
    populations: np.ndarray
    gamma: np.ndarray
    v: np.ndarray
    u: np.ndarray
    V: np.ndarray
    Vdot: np.ndarray
    fidelity: np.ndarray
    escape: np.ndarray
    initial_state: np.ndarray
    final_state: np.ndarray
    dt: float
    record_stride: int
    escape_activations: list = field(default_factory=list)
    escape_releases: list = field(default_factory=list)
    terminated_early: bool = False
    validation: dict = field(default_factory=dict)

    @property
    def n_records(self) -> int:
        return self.times.shape[0]

    def sample(self, i: int) -> ControlSample:
        return ControlSample(
            gamma=float(self.gamma[i]), v=self.v[i].copy(), u=self.u[i].copy(),
            V=float(self.V[i]), Vdot_analytic=float(self.Vdot[i]),
            escape_active=bool(self.escape[i]))


@dataclass(frozen=True)
class InvariantSet:
    """Limit-set members with their self-consistent amplitudes and values."""

    kind: str
    members: tuple
    gammas: tuple
    V_values: tuple
    target_index: Optional[int]
    target_strictly_minimal: bool


@dataclass(frozen=True)
class ConditionStatus:
    ok: bool
    offending: tuple = ()


@dataclass(frozen=True)
class ConvergenceReport:
    """Conditions i-iv of the limit-set theorems over an amplitude grid."""

    strong_regularity: ConditionStatus
    connectedness: ConditionStatus
    commutation: ConditionStatus
    distinct_spectrum: ConditionStatus
    grid: tuple

    @property
    def all_ok(self) -> bool:
        return (self.strong_regularity.ok and self.connectedness.ok
                and self.commutation.ok and self.distinct_spectrum.ok)


def _validate_design(system, target, theta, spectrum):
    """Enforce the simulate preconditions; returns a summary dict."""
    tv = validate_theta(theta, system, spectrum)
    if not tv.valid:
        raise ThetaBoundError(
            f"theta slope {theta.slope} is not below the bound "
            f"{tv.slope_bound:.6g} (C = {tv.C:.6g})")
    if is_density(target):
        defect = float(np.max(np.abs(
            system.drift_eta @ target - target @ system.drift_eta)))
        if defect > DRESSING_TOL:
            raise DesignError(
                f"target does not commute with the dressed drift "
                f"(defect {defect:.3e}); design eta first", residual=defect)
    else:
        Hpsi = system.drift_eta @ target
        resid = float(np.linalg.norm(
            Hpsi - (target.conj() @ Hpsi) * target))
        if resid > DRESSING_TOL:
            raise DesignError(
                f"target is not an eigenvector of the dressed drift "
                f"(residual {resid:.3e}); design eta first", residual=resid)
    return {
        "theta_C": tv.C,
        "theta_bound": tv.slope_bound,
        "theta_valid": tv.valid,
    }


def simulate(system: ControlSystem, initial, target, theta: ThetaSpec,
             spectrum: SpectrumSpec, shape: FeedbackShape = FeedbackShape(),
             policy: Optional[EscapePolicy] = EscapePolicy(),
             config: SimulationConfig = SimulationConfig(),
             validate: bool = True) -> TrajectoryRecord:
    """Run the closed loop: implicit amplitude, feedback, exact-unitary steps.

    Per step the amplitude is re-solved (warm-started) and frozen, the
    observable rebuilt, the feedback evaluated, the escape rule consulted,
    and the state advanced by the exponential of the total Hamiltonian.
    The piecewise-constant controls for each step are evaluated at the step
    midpoint (predicted with the previous step's propagator); start-of-step
    sampling would bias centered differences of V by (dt/4) V'' and break
    their agreement with the analytic derivative.  Recorded samples are the
    controller evaluated at the recorded states.  ``policy=None`` disables
    the escape rule.  Terminates at ``t_final`` or once fidelity reaches
    1 - 1e-6.
    """
    density = config.equation == "liouville"
    if density != is_density(np.asarray(initial)):
        raise SimulationError(
            f"{config.equation!r} run needs a "
            f"{'density matrix' if density else 'state vector'} initial state")
    if density:
        state = as_density_matrix(initial, name="initial state")
        target = as_density_matrix(target, name="target state")
    else:
        state = as_pure_state(initial, name="initial state")
        target = as_pure_state(target, name="target state")

    validation = {}
    if validate:
        validation = _validate_design(system, target, theta, spectrum)

    engine = GammaEngine(system, theta, spectrum, target=target)
    n_steps = config.n_steps
    stride = config.record_stride
    dt = config.dt
    n_rec_max = n_steps // stride + 1

    N = system.dim
    r = system.n_channels
    etas = system.etas
    gains = system.gains
    gflags = system.gamma_flags.astype(float)
    H0 = system.H0
    H_stack = np.ascontiguousarray(
        np.stack([ch.H for ch in system.channels]))
    identity_shape = shape.kind == "identity"
    sign = 1.0 if density else -1.0

    rec_t = np.empty(n_rec_max)
    rec_pop = np.empty((n_rec_max, N))
    rec_g = np.empty(n_rec_max)
    rec_v = np.empty((n_rec_max, r))
    rec_u = np.empty((n_rec_max, r))
    rec_V = np.empty(n_rec_max)
    rec_Vd = np.empty(n_rec_max)
    rec_f = np.empty(n_rec_max)
    rec_e = np.zeros(n_rec_max, dtype=bool)

    dwell_steps = int(round(policy.dwell / dt)) + 1 if policy else 0
    stall_run = 0
    override_gamma = None
    v_at_activation = None
    activations: list = []
    releases: list = []
    warm = 0.0
    warm_mid = 0.0
    i_rec = 0
    terminated_early = False
    u_mid_prev = None
    u_mid_prev2 = None

    comm_pure = _k.comm_expect_pure
    comm_dens = _k.comm_expect_density
    exp_pure = _k.expect_pure
    exp_dens = _k.expect_density

    def controller_at(st, g_pin=None, w0=0.0):
        """Amplitude (implicit unless pinned), observable and feedback."""
        if g_pin is None:
            g, _, _, P, Vs, Vf = engine.solve(st, w0)
        else:
            g = g_pin
            P = engine.P_raw(g)
            if density:
                Vs = exp_dens(P, st).real
                Vf = exp_dens(P, target).real
            else:
                Vs = exp_pure(P, st).real
                Vf = exp_pure(P, target).real
        args = np.empty(r)
        for k in range(r):
            c = (comm_dens(H_stack[k], P, st) if density
                 else comm_pure(H_stack[k], P, st))
            if abs(c.real) > COMM_RESIDUE_TOL:
                raise NotHermitianError(
                    f"channel {k}: commutator expectation residue "
                    f"{c.real:.3e}")
            args[k] = -c.imag
        if identity_shape:
            v = sign * gains * args
        else:
            v = sign * gains * np.array([shape(a) for a in args])
        return g, P, Vs, Vf, args, v

    n = 0
    try:
        for n in range(n_steps + 1):
            t = n * dt
            g, P, Vs, Vf, args, v = controller_at(
                state, g_pin=override_gamma, w0=warm)
            if override_gamma is not None and Vs < v_at_activation - policy.v_eps:
                override_gamma = None
                v_at_activation = None
                stall_run = 0
                releases.append(t)
                g, P, Vs, Vf, args, v = controller_at(state, w0=warm)
            if override_gamma is None:
                warm = g
            escape_active = override_gamma is not None

            u = etas + g * gflags + v
            drive = float(np.dot(v, args))
            if density:
                drive = -drive

            dPdg = engine.dP(g)
            if density:
                a = exp_dens(dPdg, state).real
                b = exp_dens(dPdg, target).real
            else:
                a = exp_pure(dPdg, state).real
                b = exp_pure(dPdg, target).real
            tp = 0.0 if escape_active else theta.derivative(Vs - Vf)
            denom = 1.0 - tp * (a - b)
            if denom <= 0.0:
                raise ThetaBoundError(
                    f"implicit prefactor denominator {denom:.3e} <= 0")
            vdot = drive * (1.0 + tp * b) / denom

            if density:
                fid = float(np.sum(target.T * state).real)
                pops = np.diag(state).real
            else:
                fid = float(abs(np.vdot(target, state)) ** 2)
                pops = np.abs(state) ** 2

            if policy is not None and not escape_active:
                if (abs(v).max() < policy.v_eps and g > policy.gamma_eps):
                    stall_run += 1
                else:
                    stall_run = 0
                if stall_run >= dwell_steps:
                    override_gamma = g * (1.0 - policy.alpha_fraction)
                    v_at_activation = Vs
                    stall_run = 0
                    activations.append(t)
                    log.info("escape override at t=%.3f: gamma %.6g -> %.6g",
                             t, g, override_gamma)

            if n % stride == 0:
                rec_t[i_rec] = t
                rec_pop[i_rec] = pops
                rec_g[i_rec] = g
                rec_v[i_rec] = v
                rec_u[i_rec] = u
                rec_V[i_rec] = Vs
                rec_Vd[i_rec] = vdot
                rec_f[i_rec] = fid
                rec_e[i_rec] = escape_active
                i_rec += 1

            if n == n_steps:
                break
            if fid >= FIDELITY_STOP:
                terminated_early = True
                log.info("fidelity target reached at t=%.3f", t)
                break

            # midpoint control evaluation; the predictor extrapolates the two
            # previous midpoint controls so its half-step Hamiltonian lags by
            # O(dt^2) only
            if u_mid_prev is None:
                u_pred = u
            elif u_mid_prev2 is None:
                u_pred = u_mid_prev
            else:
                u_pred = 1.5 * u_mid_prev - 0.5 * u_mid_prev2
            H_pred = H0 + np.tensordot(u_pred, H_stack, axes=1)
            wp, Vp = _k.eigh(H_pred)
            if density:
                state_mid = _k.evolve_density(wp, Vp, 0.5 * dt, state)
            else:
                state_mid = _k.evolve_pure(wp, Vp, 0.5 * dt, state)
            g_m, _, _, _, _, v_m = controller_at(
                state_mid, g_pin=override_gamma, w0=warm_mid)
            if override_gamma is None:
                warm_mid = g_m
            u_m = etas + g_m * gflags + v_m
            u_mid_prev2 = u_mid_prev
            u_mid_prev = u_m

            H_total = H0 + np.tensordot(u_m, H_stack, axes=1)
            wt, Vt = _k.eigh(H_total)
            if density:
                state = _k.evolve_density(wt, Vt, dt, state)
            else:
                state = _k.evolve_pure(wt, Vt, dt, state)
    except IlcError as exc:
        raise SimulationError(
            f"step {n} (t={n * dt:.4f}): {exc}", step=n,
            context={"gamma": override_gamma if override_gamma else warm},
        ) from exc

    return TrajectoryRecord(
        times=rec_t[:i_rec].copy(),
        populations=rec_pop[:i_rec].copy(),
        gamma=rec_g[:i_rec].copy(),
        v=rec_v[:i_rec].copy(),
        u=rec_u[:i_rec].copy(),
        V=rec_V[:i_rec].copy(),
        Vdot=rec_Vd[:i_rec].copy(),
        fidelity=rec_f[:i_rec].copy(),
        escape=rec_e[:i_rec].copy(),
        initial_state=np.asarray(initial, dtype=np.complex128).copy(),
        final_state=state.copy(),
        dt=dt,
        record_stride=stride,
        escape_activations=activations,
        escape_releases=releases,
        terminated_early=terminated_early,
        validation=validation,
    )


def _self_consistent_gamma(engine: GammaEngine, member_value: float,
                           start: float, tol: float = 1e-14,
                           max_iter: int = 200) -> float:
    """Fixed point of g = theta(member_value - V_g(target)); the member's own
    value is amplitude-independent by construction."""
    theta = engine.theta
    g = min(max(start, 0.0), theta.gamma_max)
    for _ in range(max_iter):
        P = engine.P_raw(g)
        vf = engine.value(P, engine.target)
        g_new = theta(member_value - vf)
        if abs(g_new - g) <= tol:
            return g_new
        g = g_new
    raise SimulationError("self-consistent amplitude did not converge")


def enumerate_invariant_set(system: ControlSystem, theta: ThetaSpec,
                            spectrum: SpectrumSpec, target,
                            gamma_at_set: float = 0.0) -> InvariantSet:
    """Enumerate the limit set the feedback can stall on.

    Pure targets: the dressed eigendirections (phase-free), each at its
    self-consistent amplitude.  Density targets diagonal in the dressed
    basis: all distinct permutations of the target populations over the
    dressed directions (at most N! members).
    """
    if gamma_at_set < 0:
        raise ValueError("gamma_at_set must be non-negative")
    target = np.ascontiguousarray(target, dtype=np.complex128)
    engine = GammaEngine(system, theta, spectrum, target=target)
    values = spectrum.values
    N = system.dim

    if not is_density(target):
        members = []
        gammas = []
        vvals = []
        for j in range(N):
            gj = _self_consistent_gamma(engine, float(values[j]), gamma_at_set)
            _, V = engine.frame_raw(gj)
            members.append(np.ascontiguousarray(V[:, j]))
            gammas.append(gj)
            vvals.append(float(values[j]))
        overlaps = [abs(np.vdot(m, target)) ** 2 for m in members]
        t_idx = int(np.argmax(overlaps))
        if overlaps[t_idx] < 1.0 - 1e-6:
            t_idx = None
        strictly = t_idx is not None and all(
            vvals[t_idx] < vvals[j] - 1e-15
            for j in range(N) if j != t_idx)
        return InvariantSet("E1", tuple(members), tuple(gammas), tuple(vvals),
                            t_idx, strictly)

    # density case: members are population permutations in the dressed basis
    ref_basis = engine.ref[1]
    rho_t = ref_basis.conj().T @ target @ ref_basis
    off = rho_t - np.diag(np.diag(rho_t))
    if N > 1 and np.max(np.abs(off)) > DRESSING_TOL:
        raise DesignError(
            "target is not diagonal in the dressed eigenbasis "
            f"(max off-diagonal {np.max(np.abs(off)):.3e}); design eta first")
    pops = np.diag(rho_t).real
    seen = set()
    members = []
    gammas = []
    vvals = []
    t_idx = None
    for perm in itertools.permutations(range(N)):
        permuted = tuple(round(pops[p], 12) for p in perm)
        if permuted in seen:
            continue
        seen.add(permuted)
        vval = float(np.dot(values, pops[list(perm)]))
        gj = _self_consistent_gamma(engine, vval, gamma_at_set)
        _, V = engine.frame_raw(gj)
        member = (V * pops[list(perm)]) @ V.conj().T
        if perm == tuple(range(N)):
            t_idx = len(members)
        members.append(member)
        gammas.append(gj)
        vvals.append(vval)
    strictly = t_idx is not None and all(
        vvals[t_idx] < vvals[j] - 1e-15
        for j in range(len(vvals)) if j != t_idx)
    return InvariantSet("E2", tuple(members), tuple(gammas), tuple(vvals),
                        t_idx, strictly)


def check_convergence_conditions(system: ControlSystem, theta: ThetaSpec,
                                 spectrum: SpectrumSpec,
                                 gamma_grid) -> ConvergenceReport:
    """Evaluate the four limit-set conditions at every grid amplitude.

    The grid must lie in (0, gamma_max]; failures are report content, not
    errors.
    """
    grid = tuple(float(g) for g in gamma_grid)
    if any(g <= 0 or g > theta.gamma_max for g in grid):
        raise ValueError("gamma_grid must lie in (0, gamma_max]")
    engine = GammaEngine(system, theta, spectrum)
    bad_reg = []
    bad_conn = []
    bad_comm = []
    for g in grid:
        drift = system.drift_eta + g * system.gamma_coupling
        regular, _ = check_strong_regularity(drift)
        if not regular:
            bad_reg.append((g, "transition frequencies collide"))
        report = check_full_connectedness(system, g)
        if not report.fully_connected:
            bad_conn.append((g, sorted(report.missing_pairs)))
        P = engine.P_raw(g)
        defect = float(np.max(np.abs(P @ drift - drift @ P)))
        if defect > COMMUTE_TOL:
            bad_comm.append((g, defect))
    vals = np.sort(spectrum.values)
    gap = float(np.min(np.diff(vals))) if vals.size > 1 else np.inf
    distinct = ConditionStatus(ok=gap > 0, offending=())
    return ConvergenceReport(
        strong_regularity=ConditionStatus(not bad_reg, tuple(bad_reg)),
        connectedness=ConditionStatus(not bad_conn, tuple(bad_conn)),
        commutation=ConditionStatus(not bad_comm, tuple(bad_comm)),
        distinct_spectrum=distinct,
        grid=grid,
    )

# integrators.py - One-step maps for nonequilibrium Langevin dynamics
"""
NELD Integrators

    dq = p dt
    dp = (-grad E(q) - gamma (p - A q) + A p) dt + sigma dW,   gamma = sigma^2 beta / 2

Every step function has the signature

    step_x(state, params, lattice, noise, dt, ...) -> SystemState

wraps the incoming state into the canonical cell (unless wrap_start=False),
advances the time by dt and records the replica indices it applied. The
schemes differ mainly in *when* positions are remapped: SE-A and ABAPO remap
between the position and momentum updates, which costs them an O(dt) local
error whenever a particle crosses the boundary; their corrected twins only
remap at the start and evaluate forces by minimum image afterwards.

Key Functions:
- step_em, step_se_a, step_se_b, step_se_ac
- step_abapo, step_abapo_c
- step_soile_a, step_soile_b
- step_reference: second-order Ito-Taylor expansion used as the local oracle
- get_stepper(): SchemeId -> step function
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Optional

import numpy as np

from flow_lattice import DeformingLattice, FlowMatrix, lattice_at, replica_shift, wrap
from noise import SQRT3, NoiseError, StepNoise
from potential import ForceField, drift_force, energy_forces, hessian_vec

logger = logging.getLogger(__name__)

FDR_TOL = 1e-12
SOILE_B_VARIANTS = ("ito-matched", "printed")
MID_WRAP_TIMES = ("end", "start")


class ReferenceContractError(ValueError):
    """The Ito-Taylor oracle was given a state that crosses the cell boundary"""


@dataclass(frozen=True)
class SimParams:
    """
    Physical constants of the dynamics.

    sigma is derived from gamma and beta through the fluctuation-dissipation
    relation and cannot be set independently.

    Attributes:
        gamma: friction (1/time)
        beta: inverse temperature
        flow: background flow A
        forces: WCA force field, or None for an ideal gas
        soile_b_variant: "ito-matched" (default) or "printed"
        mid_wrap_at: lattice time of the mid-step remap in SE-A and ABAPO,
            "end" (t + dt, default) or "start" (t)
    """
    gamma: float
    beta: float
    flow: FlowMatrix = field(default_factory=FlowMatrix.zero)
    forces: Optional[ForceField] = None
    soile_b_variant: str = "ito-matched"
    mid_wrap_at: str = "end"
    sigma: float = field(init=False)

    def __post_init__(self):
        if self.gamma < 0.0:
            raise ValueError(f"Friction must be non-negative, got {self.gamma}")
        if not self.beta > 0.0:
            raise ValueError(f"Inverse temperature must be positive, got {self.beta}")
        if self.soile_b_variant not in SOILE_B_VARIANTS:
            raise ValueError(f"Unknown SOILE-B variant '{self.soile_b_variant}', expected one of {SOILE_B_VARIANTS}")
        if self.mid_wrap_at not in MID_WRAP_TIMES:
            raise ValueError(f"Unknown mid-step remap time '{self.mid_wrap_at}', expected one of {MID_WRAP_TIMES}")
        sigma = math.sqrt(2.0 * self.gamma / self.beta)
        if abs(0.5 * sigma * sigma * self.beta - self.gamma) > FDR_TOL * max(1.0, self.gamma):
            raise ValueError("Fluctuation-dissipation relation violated")
        object.__setattr__(self, "sigma", sigma)


@dataclass(frozen=True)
class SystemState:
    """
    Positions, momenta and time.

    n_start / n_mid hold the replica indices applied by the last step at its
    start and in the middle of the step (zero when nothing was remapped).
    """
    q: np.ndarray
    p: np.ndarray
    t: float = 0.0
    n_start: Optional[np.ndarray] = None
    n_mid: Optional[np.ndarray] = None

    @property
    def n_particles(self) -> int:
        return self.q.shape[0]

    @property
    def crossed_mid_step(self) -> bool:
        return self.n_mid is not None and bool(np.any(self.n_mid))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.p)))


class SchemeId(Enum):
    """
    Integrators with their expected local error orders (deterministic,
    stochastic), whether they remap mid-step, and their corrected twin.
    """
    EM = ("em", 2.0, 1.5, False, None)
    SE_A = ("se_a", 2.0, 1.5, True, "se_ac")
    SE_B = ("se_b", 2.0, 1.5, False, None)
    SE_AC = ("se_ac", 2.0, 1.5, False, None)
    ABAPO = ("abapo", 2.0, 1.5, True, "abapo_c")
    ABAPO_C = ("abapo_c", 2.0, 1.5, False, None)
    SOILE_A = ("soile_a", 3.0, 2.5, False, None)
    SOILE_B = ("soile_b", 3.0, 2.5, False, None)
    REFERENCE = ("reference", math.inf, math.inf, False, None)

    def __init__(self, key, det_order, stoch_order, mid_step_wrap, twin):
        self.key = key
        self.det_order = det_order
        self.stoch_order = stoch_order
        self.mid_step_wrap = mid_step_wrap
        self.twin_key = twin

    @classmethod
    def parse(cls, name: str) -> "SchemeId":
        key = name.strip().lower().replace("-", "_")
        for scheme in cls:
            if scheme.key == key:
                return scheme
        raise ValueError(f"Unknown scheme '{name}'; expected one of {[s.key for s in cls]}")

    @property
    def twin(self) -> Optional["SchemeId"]:
        return SchemeId.parse(self.twin_key) if self.twin_key else None

    @property
    def uses_ou_noise(self) -> bool:
        return self in (SchemeId.ABAPO, SchemeId.ABAPO_C)


# ----------------------------------------------------------------------
# Helpers
# ----------------------------------------------------------------------
def _check_noise(noise: StepNoise, dt: float):
    if not math.isclose(noise.dt, dt, rel_tol=1e-12, abs_tol=0.0):
        raise NoiseError(f"Step noise is for dt={noise.dt}, step uses dt={dt}")


def _start(state: SystemState, lattice: DeformingLattice, wrap_start: bool):
    if not wrap_start:
        return state.q, state.p, np.zeros_like(state.q, dtype=np.int64)
    return wrap(state.q, state.p, lattice, state.t)


def _grad_force(q: np.ndarray, params: SimParams, lattice: DeformingLattice, t: float) -> np.ndarray:
    return energy_forces(q, lattice, t, params.forces)[1]


def _mid_wrap_time(state: SystemState, params: SimParams, dt: float) -> float:
    return state.t + dt if params.mid_wrap_at == "end" else state.t


def _finish(q, p, t, n_start, n_mid=None) -> SystemState:
    return SystemState(q, p, t, n_start=n_start,
                       n_mid=n_mid if n_mid is not None else np.zeros_like(n_start))


# ----------------------------------------------------------------------
# First-order schemes
# ----------------------------------------------------------------------
def step_em(state: SystemState, params: SimParams, lattice: DeformingLattice,
            noise: StepNoise, dt: float, wrap_start: bool = True) -> SystemState:
    """
    Euler-Maruyama: one remap at the start, then

        q' = q + p dt
        p' = p + F(p, q) dt + sigma sqrt(dt) eta
    """
    _check_noise(noise, dt)
    q, p, n1 = _start(state, lattice, wrap_start)
    force = drift_force(p, q, params, lattice, state.t)
    q_new = q + p * dt
    p_new = p + force * dt + params.sigma * math.sqrt(dt) * noise.eta
    return _finish(q_new, p_new, state.t + dt, n1)


def _se_a_kick(p, q_new, params, lattice, t_new, noise, dt):
    force = drift_force(p, q_new, params, lattice, t_new)
    return p + force * dt + params.sigma * math.sqrt(dt) * noise.eta


def step_se_a(state: SystemState, params: SimParams, lattice: DeformingLattice,
              noise: StepNoise, dt: float, wrap_start: bool = True) -> SystemState:
    """
    Symplectic Euler A with a remap between the position and momentum updates.

    The mid-step remap shifts p by -A L n before the force is evaluated,
    which leaves an O(dt) error every time a particle crosses the boundary.
    With params.mid_wrap_at = "start" the remap uses the cell at t, which
    moves the leading defect from p into q.
    """
    _check_noise(noise, dt)
    q, p, n1 = _start(state, lattice, wrap_start)
    t_new = state.t + dt
    q_mid = q + p * dt
    q_new, p_adj, n2 = wrap(q_mid, p, lattice, _mid_wrap_time(state, params, dt))
    if not np.any(n2):
        # identical arithmetic to SE-AC when nothing crosses
        q_new, p_adj = q_mid, p
    p_new = _se_a_kick(p_adj, q_new, params, lattice, t_new, noise, dt)
    return _finish(q_new, p_new, t_new, n1, n2)


def step_se_ac(state: SystemState, params: SimParams, lattice: DeformingLattice,
               noise: StepNoise, dt: float, wrap_start: bool = True) -> SystemState:
    """
    Corrected SE-A: remap only at the start; the force at the new position
    is evaluated by minimum image with q' possibly outside the cell.
    """
    _check_noise(noise, dt)
    q, p, n1 = _start(state, lattice, wrap_start)
    t_new = state.t + dt
    q_new = q + p * dt
    p_new = _se_a_kick(p, q_new, params, lattice, t_new, noise, dt)
    return _finish(q_new, p_new, t_new, n1)


def step_se_b(state: SystemState, params: SimParams, lattice: DeformingLattice,
              noise: StepNoise, dt: float, wrap_start: bool = True) -> SystemState:
    """
    Symplectic Euler B, implicit (but linear) in the new momentum:

        (I + (gamma I - A) dt) p' = p + (-grad E(q) + gamma A q) dt + sigma sqrt(dt) eta
        q' = q + p' dt
    """
    _check_noise(noise, dt)
    q, p, n1 = _start(state, lattice, wrap_start)
    a = params.flow.diag
    divisor = 1.0 + (params.gamma - a) * dt
    if np.any(divisor <= 0.0):
        raise ValueError(f"dt={dt} too large for SE-B: 1 + (gamma - a) dt must stay positive")
    rhs = (p + (_grad_force(q, params, lattice, state.t) + params.gamma * params.flow.apply(q)) * dt
           + params.sigma * math.sqrt(dt) * noise.eta)
    p_new = rhs / divisor
    q_new = q + p_new * dt
    return _finish(q_new, p_new, state.t + dt, n1)


# ----------------------------------------------------------------------
# Splitting schemes
# ----------------------------------------------------------------------
def _o_step(p, q, params: SimParams, dt: float, xi: np.ndarray) -> np.ndarray:
    """Exact Ornstein-Uhlenbeck update of p with q frozen"""
    decay = math.exp(-params.gamma * dt)
    spread = math.sqrt((1.0 - math.exp(-2.0 * params.gamma * dt)) / params.beta)
    return decay * p + (1.0 - decay) * params.flow.apply(q) + spread * xi


def _abapo(state, params, lattice, noise, dt, xi, wrap_start, mid_wrap):
    _check_noise(noise, dt)
    if xi is None:
        xi = noise.eta
    q, p, n1 = _start(state, lattice, wrap_start)
    t_new = state.t + dt
    p = p + 0.5 * dt * _grad_force(q, params, lattice, state.t)
    q = q + dt * p
    n2 = np.zeros_like(n1)
    if mid_wrap:
        q_w, p_w, n2 = wrap(q, p, lattice, _mid_wrap_time(state, params, dt))
        if np.any(n2):
            q, p = q_w, p_w
        else:
            n2 = np.zeros_like(n1)
    p = p + 0.5 * dt * _grad_force(q, params, lattice, t_new)
    p = params.flow.expm(dt) * p
    p = _o_step(p, q, params, dt, xi)
    return _finish(q, p, t_new, n1, n2)


def step_abapo(state: SystemState, params: SimParams, lattice: DeformingLattice,
               noise: StepNoise, dt: float, xi: Optional[np.ndarray] = None,
               wrap_start: bool = True) -> SystemState:
    """
    Kick-drift-kick Verlet, exact flow kick exp(A dt), exact OU step, with a
    remap after the drift.

    Args:
        xi: unit-variance OU noise for the step (defaults to noise.eta, the
            single-fine-step value)
    """
    return _abapo(state, params, lattice, noise, dt, xi, wrap_start, mid_wrap=True)


def step_abapo_c(state: SystemState, params: SimParams, lattice: DeformingLattice,
                 noise: StepNoise, dt: float, xi: Optional[np.ndarray] = None,
                 wrap_start: bool = True) -> SystemState:
    """ABAPO with the remap only at the start; forces after the drift by minimum image"""
    return _abapo(state, params, lattice, noise, dt, xi, wrap_start, mid_wrap=False)


# ----------------------------------------------------------------------
# Second-order schemes
# ----------------------------------------------------------------------
def _integral_noise(params: SimParams, noise: StepNoise, dt: float) -> np.ndarray:
    """sigma * int (W(s) - W(t)) ds for the step"""
    return params.sigma * dt ** 1.5 * (0.5 * noise.eta + noise.zeta / (2.0 * SQRT3))


def step_soile_a(state: SystemState, params: SimParams, lattice: DeformingLattice,
                 noise: StepNoise, dt: float, wrap_start: bool = True) -> SystemState:
    """
    Second-order velocity-Verlet-type Langevin scheme:

        G  = sigma dt^(3/2) (eta/2 + zeta/(2 sqrt 3))
        q' = q + p dt + F(p, q) dt^2/2 + G
        p' = p + [F(p, q') + F(p, q)] dt/2 + sigma sqrt(dt) eta + (A - gamma I)(F(p, q) dt^2/2 + G)
    """
    _check_noise(noise, dt)
    q, p, n1 = _start(state, lattice, wrap_start)
    t_new = state.t + dt
    g = _integral_noise(params, noise, dt)
    force0 = drift_force(p, q, params, lattice, state.t)
    q_new = q + p * dt + force0 * (0.5 * dt * dt) + g
    force1 = drift_force(p, q_new, params, lattice, t_new)
    correction = force0 * (0.5 * dt * dt) + g
    p_new = (p + (force1 + force0) * (0.5 * dt) + params.sigma * math.sqrt(dt) * noise.eta
             + params.flow.apply(correction) - params.gamma * correction)
    return _finish(q_new, p_new, t_new, n1)


def step_soile_b(state: SystemState, params: SimParams, lattice: DeformingLattice,
                 noise: StepNoise, dt: float, wrap_start: bool = True) -> SystemState:
    """
    Quasi-symplectic half-kick / drift / half-kick scheme with friction
    corrections. params.soile_b_variant selects the noise coefficients:

    "ito-matched": q noise G = sigma dt^(3/2)(eta/2 + zeta/(2 sqrt 3)), each
        half-kick adds (A - gamma I)(K dt^2/8 + G/2) and the second half-kick
        carries the full sigma sqrt(dt) eta, so the one-step expansion matches
        the Ito-Taylor expansion through second order.
    "printed": q noise sigma dt^(3/2) zeta/sqrt 3, half-kick corrections
        -(gamma I - A)/4 [K dt^2/2 + sigma dt^(3/2)(eta/2 + zeta/sqrt 3)] and
        sigma sqrt(dt) eta/2 in the second half-kick, as printed.
    """
    _check_noise(noise, dt)
    q, p, n1 = _start(state, lattice, wrap_start)
    t_new = state.t + dt
    gamma, flow, sigma = params.gamma, params.flow, params.sigma

    def friction_correction(x):
        return flow.apply(x) - gamma * x

    force0 = drift_force(p, q, params, lattice, state.t)
    if params.soile_b_variant == "printed":
        c = sigma * dt ** 1.5 * (0.5 * noise.eta + noise.zeta / SQRT3)
        p_half = p + 0.5 * dt * force0 + 0.25 * friction_correction(force0 * (0.5 * dt * dt) + c)
        q_new = q + p_half * dt + sigma * dt ** 1.5 * noise.zeta / SQRT3
        force1 = drift_force(p_half, q_new, params, lattice, t_new)
        p_new = (p_half + 0.5 * dt * force1 + 0.5 * sigma * math.sqrt(dt) * noise.eta
                 + 0.25 * friction_correction(force1 * (0.5 * dt * dt) + c))
    else:
        g = _integral_noise(params, noise, dt)
        p_half = p + 0.5 * dt * force0 + friction_correction(force0 * (dt * dt / 8.0) + 0.5 * g)
        q_new = q + p_half * dt + g
        force1 = drift_force(p_half, q_new, params, lattice, t_new)
        p_new = (p_half + 0.5 * dt * force1 + sigma * math.sqrt(dt) * noise.eta
                 + friction_correction(force1 * (dt * dt / 8.0) + 0.5 * g))
    return _finish(q_new, p_new, t_new, n1)


# ----------------------------------------------------------------------
# Ito-Taylor oracle
# ----------------------------------------------------------------------
def step_reference(state: SystemState, params: SimParams, lattice: DeformingLattice,
                   noise: StepNoise, dt: float, check_interior: bool = True) -> SystemState:
    """
    Second-order Ito-Taylor expansion of one step, evaluated exactly:

        q' = q + p dt + F dt^2/2 + sigma I
        p' = p + F dt + sigma sqrt(dt) eta
               + [(-hess E + gamma A) p + (A - gamma I) F] dt^2/2
               + sigma (A - gamma I) I

    with I = dt^(3/2)(eta/2 + zeta/(2 sqrt 3)). No remapping is done.

    Raises:
        ReferenceContractError: if the start or end positions leave the cell
    """
    _check_noise(noise, dt)
    q, p, t = state.q, state.p, state.t
    t_new = t + dt
    if check_interior:
        _require_inside(q, lattice, t, "start")

    force = drift_force(p, q, params, lattice, t)
    hp = hessian_vec(q, p, lattice, t, params.forces)
    g = _integral_noise(params, noise, dt)
    flow, gamma = params.flow, params.gamma

    drift2 = -hp + gamma * flow.apply(p) + flow.apply(force) - gamma * force
    q_new = q + p * dt + force * (0.5 * dt * dt) + g
    p_new = (p + force * dt + params.sigma * math.sqrt(dt) * noise.eta
             + drift2 * (0.5 * dt * dt) + flow.apply(g) - gamma * g)

    if check_interior:
        _require_inside(q_new, lattice, t_new, "end")
    zeros = np.zeros_like(q, dtype=np.int64)
    return SystemState(q_new, p_new, t_new, n_start=zeros, n_mid=zeros)


def _require_inside(q: np.ndarray, lattice: DeformingLattice, t: float, where: str):
    L = lattice_at(lattice, t)
    if np.any(q < 0.0) or np.any(q >= L):
        raise ReferenceContractError(
            f"Reference step needs an interior state; positions leave the cell at the {where} of the step"
        )


STEPPERS: Dict[SchemeId, Callable[..., SystemState]] = {
    SchemeId.EM: step_em,
    SchemeId.SE_A: step_se_a,
    SchemeId.SE_B: step_se_b,
    SchemeId.SE_AC: step_se_ac,
    SchemeId.ABAPO: step_abapo,
    SchemeId.ABAPO_C: step_abapo_c,
    SchemeId.SOILE_A: step_soile_a,
    SchemeId.SOILE_B: step_soile_b,
    SchemeId.REFERENCE: step_reference,
}


def get_stepper(scheme) -> Callable[..., SystemState]:
    """Step function for a SchemeId or scheme name"""
    if not isinstance(scheme, SchemeId):
        scheme = SchemeId.parse(scheme)
    return STEPPERS[scheme]


def shift_state(state: SystemState, n: np.ndarray, lattice: DeformingLattice) -> SystemState:
    """replica_shift for a SystemState at its own time"""
    q, p = replica_shift(state.q, state.p, n, lattice, state.t)
    return SystemState(q, p, state.t)

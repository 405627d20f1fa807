# flow_lattice.py - Background flow and deforming periodic cell
"""
Deforming Periodic Lattice

Geometry for homogeneous nonequilibrium flows with a diagonal, trace-free
velocity gradient A:
- Cell edges L_t = exp(A t) L0, evaluated with exact scalar exponentials
- Replica arithmetic: a particle at (q, p) has images (q + L_t n, p + A L_t n)
- Wrapping into the canonical cell [0, L_t) with the replica index returned
- Minimum-image displacements for pair forces

Arrays are (N, 3): one row per particle, one column per Cartesian axis.

Key Functions:
- lattice_at(): cell edges at time t
- wrap(): remap positions into the canonical cell, adjusting momenta
- replica_shift(): move a configuration to another replica
- min_image(): nearest-image displacement (ties go to the negative image)
- replica_distance(): compare two states modulo replica equivalence
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

TRACE_TOL = 1e-12


class LatticeError(ValueError):
    """Invalid flow matrix or simulation cell"""


class BlowUpError(FloatingPointError):
    """Non-finite coordinates: the trajectory has blown up"""


@dataclass(frozen=True)
class FlowMatrix:
    """
    Diagonal trace-free velocity gradient, applied identically to every particle.

    Attributes:
        diag: the three strain rates (1/time)
    """
    diag: np.ndarray

    def __post_init__(self):
        diag = np.asarray(self.diag, dtype=float).reshape(-1)
        if diag.shape != (3,):
            raise LatticeError(f"Flow needs exactly 3 rates, got {diag.shape[0]}")
        if not np.all(np.isfinite(diag)):
            raise LatticeError("Flow rates must be finite")
        if abs(diag.sum()) > TRACE_TOL:
            raise LatticeError(f"Flow must be trace-free, trace = {diag.sum():.3e}")
        diag.setflags(write=False)
        object.__setattr__(self, "diag", diag)

    @classmethod
    def from_matrix(cls, matrix) -> "FlowMatrix":
        """Build from a full 3x3 gradient; only diagonal gradients are accepted"""
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape != (3, 3):
            raise LatticeError(f"Expected a 3x3 matrix, got shape {matrix.shape}")
        off_diagonal = matrix - np.diag(np.diag(matrix))
        if np.any(off_diagonal != 0.0):
            raise LatticeError("Only diagonal flows are supported (no shear)")
        return cls(np.diag(matrix).copy())

    @classmethod
    def zero(cls) -> "FlowMatrix":
        return cls(np.zeros(3))

    def apply(self, x: np.ndarray) -> np.ndarray:
        """A x for per-particle rows"""
        return x * self.diag

    def expm(self, dt: float) -> np.ndarray:
        """Diagonal of exp(A dt)"""
        return np.exp(self.diag * dt)


@dataclass(frozen=True)
class DeformingLattice:
    """
    Orthorhombic cell that stretches with the flow.

    Attributes:
        L0: cell edges at t = 0
        flow: background flow
        t: time the lattice is currently viewed at
        cutoff: pair cutoff the cell must accommodate
        t_end: last time the cell must stay non-degenerate
    """
    L0: np.ndarray
    flow: FlowMatrix
    t: float = 0.0
    cutoff: float = 0.0
    t_end: float = 0.0

    def __post_init__(self):
        L0 = np.asarray(self.L0, dtype=float).reshape(-1)
        if L0.size == 1:
            L0 = np.repeat(L0, 3)
        if L0.shape != (3,) or not np.all(np.isfinite(L0)) or np.any(L0 <= 0.0):
            raise LatticeError(f"Cell edges must be 3 positive numbers, got {self.L0}")
        L0.setflags(write=False)
        object.__setattr__(self, "L0", L0)

        if self.t < 0.0 or self.t_end < 0.0:
            raise LatticeError("Lattice times must be non-negative")
        if self.cutoff > 0.0:
            for when in (0.0, self.t_end):
                edges = lattice_at(self, when)
                if edges.min() < 2.0 * self.cutoff:
                    raise LatticeError(
                        f"Cell edge {edges.min():.4f} at t={when} is shorter than "
                        f"twice the cutoff {self.cutoff:.4f}"
                    )

    def at(self, t: float) -> "DeformingLattice":
        return replace(self, t=t)

    @property
    def edges(self) -> np.ndarray:
        return lattice_at(self, self.t)

    @property
    def volume(self) -> float:
        return float(np.prod(self.edges))


def lattice_at(lattice: DeformingLattice, t: float) -> np.ndarray:
    """
    Cell edges at time t: exp(a_i t) * L0_i.

    Args:
        lattice: the deforming lattice
        t: time (>= 0)

    Returns:
        Array of the 3 edge lengths
    """
    if t == 0.0:
        return np.array(lattice.L0)
    return lattice.flow.expm(t) * lattice.L0


def _check_finite(*arrays: np.ndarray):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise BlowUpError("Non-finite coordinates encountered (numerical blow-up)")


def wrap(q: np.ndarray, p: np.ndarray, lattice: DeformingLattice,
         t: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Remap positions into the canonical cell [0, L_t) and adjust momenta.

    Args:
        q: positions (N, 3)
        p: momenta (N, 3)
        lattice: the deforming lattice
        t: time the positions belong to

    Returns:
        (q_wrapped, p_wrapped, n) with q_wrapped = q - L_t n and
        p_wrapped = p - A L_t n
    """
    _check_finite(q, p)
    L = lattice_at(lattice, t)
    n = np.floor(q / L).astype(np.int64)
    q_w = q - L * n

    # floor can land one cell off when q/L rounds onto an integer
    upper = q_w >= L
    lower = q_w < 0.0
    if upper.any() or lower.any():
        n = n + upper.astype(np.int64) - lower.astype(np.int64)
        q_w = q - L * n
        # within one ulp of a face the corrected value can still round outside
        q_w = np.minimum(np.maximum(q_w, 0.0), np.nextafter(L, 0.0))

    p_w = p - lattice.flow.apply(L * n)
    return q_w, p_w, n


def replica_shift(q: np.ndarray, p: np.ndarray, n: np.ndarray,
                  lattice: DeformingLattice, t: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Move a configuration to the replica n: (q + L_t n, p + A L_t n).

    Args:
        q: positions (N, 3)
        p: momenta (N, 3)
        n: integer replica counts (N, 3)
        lattice: the deforming lattice
        t: time of the configuration

    Returns:
        (q_shifted, p_shifted)
    """
    Ln = lattice_at(lattice, t) * n
    return q + Ln, p + lattice.flow.apply(Ln)


def min_image(dq: np.ndarray, lattice: DeformingLattice, t: float) -> np.ndarray:
    """
    Map displacements into [-L/2, L/2) per axis.

    A displacement of exactly half an edge maps to the negative end.
    """
    L = lattice_at(lattice, t)
    return dq - L * np.floor(dq / L + 0.5)


def replica_distance(q1: np.ndarray, p1: np.ndarray, q2: np.ndarray, p2: np.ndarray,
                     lattice: DeformingLattice, t: float) -> Tuple[float, float]:
    """
    l2 distance between two states modulo replica equivalence.

    Both states are wrapped with the same convention; the second one is then
    moved to the replica nearest to the first, per particle and axis, with its
    momentum shifted consistently.

    Returns:
        (position distance, momentum distance)
    """
    q1w, p1w, _ = wrap(q1, p1, lattice, t)
    q2w, p2w, _ = wrap(q2, p2, lattice, t)
    L = lattice_at(lattice, t)
    n = np.floor((q1w - q2w) / L + 0.5).astype(np.int64)
    q2s, p2s = replica_shift(q2w, p2w, n, lattice, t)
    return float(np.linalg.norm(q1w - q2s)), float(np.linalg.norm(p1w - p2s))


def build_lattice(box_length, flow_rates: Sequence[float], cutoff: float = 0.0,
                  t_end: float = 0.0) -> DeformingLattice:
    """Convenience constructor from plain numbers"""
    flow = FlowMatrix(np.asarray(flow_rates, dtype=float))
    lattice = DeformingLattice(np.asarray(box_length, dtype=float), flow, cutoff=cutoff, t_end=t_end)
    logger.debug(f"Lattice L0={lattice.L0.tolist()} flow={flow.diag.tolist()} t_end={t_end}")
    return lattice


def volume_drift(lattice: DeformingLattice, t: float) -> float:
    """Relative change of the cell volume at time t (zero for trace-free flow)"""
    v0 = math.prod(lattice.L0)
    return abs(float(np.prod(lattice_at(lattice, t))) - v0) / v0

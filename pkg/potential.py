# potential.py - WCA pair potential, forces and the NELD momentum drift
"""
WCA Force Field

Purely repulsive Weeks-Chandler-Andersen interactions in reduced units
(energy, length and mass scales all 1):

    phi(r) = r^-12 - r^-6 + 1/4   for r < 2^(1/6), else 0

Pair displacements use the minimum image of the deforming cell, so forces
are well defined for positions outside the canonical cell.

Key Functions:
- wca_pair(): energy and radial derivative for a distance (scalar or array)
- ForceField.energy_forces(): total energy and -grad E
- ForceField.hessian_vec(): analytic Hessian-vector product
- drift_force(): F(p, q) = -grad E(q) - gamma (p - A q) + A p

Pairs are visited in sorted (i, j) order and accumulated serially, so the
cell list and the all-pairs search give bit-identical forces. An optional
threaded mode splits the pair list into fixed chunks and reduces the
partial sums with a fixed tree, reproducible for a given thread count.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from flow_lattice import DeformingLattice, lattice_at, min_image

logger = logging.getLogger(__name__)

WCA_CUTOFF = 2.0 ** (1.0 / 6.0)
OVERLAP_DISTANCE = 1e-8

ArrayOrFloat = Union[float, np.ndarray]


class OverlapError(ValueError):
    """Two particles (numerically) on top of each other"""


@dataclass(frozen=True)
class WcaParams:
    """WCA parameters in reduced units; only the cutoff is free"""
    cutoff: float = WCA_CUTOFF

    def continuity_defect(self) -> Tuple[float, float]:
        """phi and phi' evaluated just at the cutoff with the inner branch formulas"""
        r = self.cutoff
        return r ** -12 - r ** -6 + 0.25, -12.0 * r ** -13 + 6.0 * r ** -7


def wca_pair(r: ArrayOrFloat, cutoff: float = WCA_CUTOFF) -> Tuple[ArrayOrFloat, ArrayOrFloat]:
    """
    WCA energy and d(phi)/dr.

    Args:
        r: pair distance(s), strictly positive
        cutoff: interaction range

    Returns:
        (energy, derivative), scalars for scalar input
    """
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr <= 0.0):
        raise OverlapError(f"Pair distance must be positive, got min {r_arr.min():.3e}")

    inside = r_arr < cutoff
    inv = np.where(inside, 1.0 / r_arr, 0.0)
    inv6 = inv ** 6
    energy = np.where(inside, inv6 * inv6 - inv6 + 0.25, 0.0)
    deriv = np.where(inside, (-12.0 * inv6 * inv6 + 6.0 * inv6) * inv, 0.0)

    if r_arr.ndim == 0:
        return float(energy), float(deriv)
    return energy, deriv


def wca_second(r: np.ndarray) -> np.ndarray:
    """d2(phi)/dr2 inside the cutoff"""
    inv = 1.0 / r
    inv6 = inv ** 6
    return (156.0 * inv6 * inv6 - 42.0 * inv6) * inv * inv


class ForceField:
    """
    WCA interactions over a deforming periodic cell.

    Args:
        params: WCA parameters
        use_cells: find pairs with a cell list instead of all pairs
        threads: > 1 enables the chunked threaded accumulation
    """

    def __init__(self, params: Optional[WcaParams] = None, use_cells: bool = True, threads: int = 1):
        self.params = params or WcaParams()
        self.use_cells = use_cells
        self.threads = max(1, int(threads))
        self.logger = logging.getLogger(f"ForceField_{'cells' if use_cells else 'allpairs'}")

    # ------------------------------------------------------------------
    # Pair search
    # ------------------------------------------------------------------
    def candidate_pairs(self, q: np.ndarray, lattice: DeformingLattice, t: float) -> Tuple[np.ndarray, np.ndarray]:
        """Candidate pairs (i < j), sorted by (i, j)"""
        n_particles = q.shape[0]
        if n_particles < 2:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty

        if self.use_cells:
            pairs = self._cell_pairs(q, lattice, t)
            if pairs is not None:
                return pairs

        i, j = np.triu_indices(n_particles, k=1)
        return i.astype(np.int64), j.astype(np.int64)

    def _cell_pairs(self, q: np.ndarray, lattice: DeformingLattice, t: float) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        L = lattice_at(lattice, t)
        # small skin so rounding at cell faces cannot hide a pair
        n_cells = np.floor(L / (self.params.cutoff * (1.0 + 1e-9))).astype(np.int64)
        if np.any(n_cells < 3):
            return None

        n_particles = q.shape[0]
        frac = q / L
        frac = frac - np.floor(frac)
        cell3 = np.floor(frac * n_cells).astype(np.int64) % n_cells
        nx, ny, nz = (int(v) for v in n_cells)

        def flat(c):
            return (c[:, 0] * ny + c[:, 1]) * nz + c[:, 2]

        cell_id = flat(cell3)
        order = np.argsort(cell_id, kind="stable")
        counts = np.bincount(cell_id, minlength=nx * ny * nz)
        starts = np.cumsum(counts) - counts

        keys: List[np.ndarray] = []
        idx = np.arange(n_particles, dtype=np.int64)
        for offset in itertools.product((-1, 0, 1), repeat=3):
            neighbor = flat((cell3 + np.array(offset)) % n_cells)
            cnt = counts[neighbor]
            total = int(cnt.sum())
            if total == 0:
                continue
            i_rep = np.repeat(idx, cnt)
            within = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            j_rep = order[np.repeat(starts[neighbor], cnt) + within]
            keep = i_rep < j_rep
            keys.append(i_rep[keep] * n_particles + j_rep[keep])

        if not keys:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty
        key = np.unique(np.concatenate(keys))
        return key // n_particles, key % n_particles

    def interacting_pairs(self, q: np.ndarray, lattice: DeformingLattice, t: float,
                          minimum_image: bool = True):
        """
        Pairs within the cutoff with their displacement vectors.

        Returns:
            (i, j, dq, r) with dq = q_i - q_j (minimum image) and r = |dq|
        """
        i, j = self.candidate_pairs(q, lattice, t)
        dq = q[i] - q[j]
        if minimum_image:
            dq = min_image(dq, lattice, t)
        r = np.sqrt(dq[:, 0] * dq[:, 0] + dq[:, 1] * dq[:, 1] + dq[:, 2] * dq[:, 2])
        mask = r < self.params.cutoff
        i, j, dq, r = i[mask], j[mask], dq[mask], r[mask]
        if r.size and r.min() < OVERLAP_DISTANCE:
            k = int(np.argmin(r))
            raise OverlapError(f"Particles {i[k]} and {j[k]} overlap (r = {r[k]:.3e})")
        return i, j, dq, r

    # ------------------------------------------------------------------
    # Energy, forces, Hessian
    # ------------------------------------------------------------------
    def energy_forces(self, q: np.ndarray, lattice: DeformingLattice, t: float,
                      minimum_image: bool = True) -> Tuple[float, np.ndarray]:
        """
        Total WCA energy and forces -grad E.

        Args:
            q: positions (N, 3), inside or outside the canonical cell
            lattice: the deforming lattice
            t: time of the configuration
            minimum_image: use the nearest periodic image for each pair

        Returns:
            (E, forces) with forces of shape (N, 3)
        """
        i, j, dq, r = self.interacting_pairs(q, lattice, t, minimum_image)
        n_particles = q.shape[0]
        if r.size == 0:
            return 0.0, np.zeros_like(q, dtype=float)

        energy, deriv = wca_pair(r, self.params.cutoff)
        # force on i along the unit vector from j to i
        f_ij = (-deriv / r)[:, None] * dq

        if self.threads == 1:
            return float(np.sum(energy)), _accumulate(i, j, f_ij, n_particles)

        chunks = np.array_split(np.arange(r.size), self.threads)
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            partial = list(pool.map(
                lambda c: (np.sum(energy[c]), _accumulate(i[c], j[c], f_ij[c], n_particles)),
                chunks,
            ))
        return float(_tree_sum([e for e, _ in partial])), _tree_sum([f for _, f in partial])

    def hessian_vec(self, q: np.ndarray, v: np.ndarray, lattice: DeformingLattice, t: float,
                    minimum_image: bool = True) -> np.ndarray:
        """
        Analytic Hessian of E contracted with v.

        Each pair contributes H = phi'' u u^T + (phi'/r)(I - u u^T) acting on
        v_i - v_j, with opposite sign on j.
        """
        i, j, dq, r = self.interacting_pairs(q, lattice, t, minimum_image)
        if r.size == 0:
            return np.zeros_like(q, dtype=float)

        _, deriv = wca_pair(r, self.params.cutoff)
        second = wca_second(r)
        u = dq / r[:, None]
        w = v[i] - v[j]
        uw = np.sum(u * w, axis=1)
        h_w = (second * uw)[:, None] * u + (deriv / r)[:, None] * (w - uw[:, None] * u)
        return _accumulate(i, j, h_w, q.shape[0])


def _accumulate(i: np.ndarray, j: np.ndarray, values: np.ndarray, n_particles: int) -> np.ndarray:
    """Add values to rows i and subtract from rows j, in pair order"""
    out = np.empty((n_particles, 3))
    for axis in range(3):
        out[:, axis] = (np.bincount(i, weights=values[:, axis], minlength=n_particles)
                        - np.bincount(j, weights=values[:, axis], minlength=n_particles))
    return out


def _tree_sum(parts: list):
    """Pairwise reduction with a fixed shape"""
    while len(parts) > 1:
        merged = [parts[k] + parts[k + 1] for k in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            merged.append(parts[-1])
        parts = merged
    return parts[0]


def energy_forces(q: np.ndarray, lattice: DeformingLattice, t: float,
                  forces: Optional[ForceField] = None) -> Tuple[float, np.ndarray]:
    """Module-level shortcut; no force field means an ideal gas"""
    if forces is None:
        return 0.0, np.zeros_like(q, dtype=float)
    return forces.energy_forces(q, lattice, t)


def hessian_vec(q: np.ndarray, v: np.ndarray, lattice: DeformingLattice, t: float,
                forces: Optional[ForceField] = None) -> np.ndarray:
    if forces is None:
        return np.zeros_like(q, dtype=float)
    return forces.hessian_vec(q, v, lattice, t)


def drift_force(p: np.ndarray, q: np.ndarray, params, lattice: DeformingLattice, t: float) -> np.ndarray:
    """
    NELD momentum drift F(p, q) = -grad E(q) - gamma (p - A q) + A p.

    Args:
        p: momenta (N, 3)
        q: positions (N, 3); may lie outside the canonical cell
        params: object with gamma, flow and forces (see integrators.SimParams)
        lattice: the deforming lattice
        t: time of the configuration

    Returns:
        F of shape (N, 3)
    """
    _, grad_force = energy_forces(q, lattice, t, params.forces)
    flow = params.flow
    return grad_force - params.gamma * (p - flow.apply(q)) + flow.apply(p)

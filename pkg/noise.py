# noise.py - Counter-based Brownian path with exact coarsening
"""
Brownian Noise for Coupled Step-Size Ladders

One fine-grid Brownian path drives every step size of a convergence ladder.
Per fine step k the path stores two independent standard normal arrays:

    eta  = (W(t_k + h) - W(t_k)) / sqrt(h)
    zeta = 2 sqrt(3) / h^(3/2) * int (W(s) - W(t_k)) ds - sqrt(3) eta

Values come from a counter-based Philox stream keyed by the seed with the
step index in the counter, so entry (k, i) depends only on (seed, k, i):
paths are reproducible, extendable and can be generated in any order.

Key Functions:
- sample_fine(): fine path for a seed (optionally starting at a step offset)
- coarsen(): exact combination of two consecutive steps into one of size 2h
- coarsen_ladder(): step noise for level m (step 2^m h)
- ou_noise() / ou_noise_ladder(): normalized Ornstein-Uhlenbeck functional xi
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
SQRT3 = math.sqrt(3.0)
SEED_MASK = (1 << 64) - 1


class NoiseError(ValueError):
    """Inconsistent step sizes, windows or ladder levels"""


@dataclass(frozen=True)
class StepNoise:
    """Noise for exactly one integrator step of size dt"""
    eta: np.ndarray
    zeta: np.ndarray
    dt: float

    @property
    def increment(self) -> np.ndarray:
        """Brownian increment W(t + dt) - W(t)"""
        return math.sqrt(self.dt) * self.eta

    @property
    def integral(self) -> np.ndarray:
        """int_t^{t+dt} (W(s) - W(t)) ds"""
        return self.dt ** 1.5 * (0.5 * self.eta + self.zeta / (2.0 * SQRT3))

    @classmethod
    def zeros(cls, shape, dt: float) -> "StepNoise":
        return cls(np.zeros(shape), np.zeros(shape), dt)


@dataclass(frozen=True)
class NoisePath:
    """
    Fine-grid noise for one run.

    Attributes:
        seed: 64-bit key of the counter-based generator
        h_fine: finest step size
        steps: number of fine steps
        dim: particle count (each step carries (dim, 3) values)
        eta, zeta: arrays of shape (steps, dim, 3)
        start: index of the first stored step
    """
    seed: int
    h_fine: float
    steps: int
    dim: int
    eta: np.ndarray
    zeta: np.ndarray
    start: int = 0

    def step(self, k: int) -> StepNoise:
        return StepNoise(self.eta[k], self.zeta[k], self.h_fine)

    def __len__(self) -> int:
        return self.steps


def fine_step_noise(seed: int, k: int, dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """(eta, zeta) of fine step k, drawn from its own Philox counter block"""
    bit_gen = np.random.Philox(key=seed & SEED_MASK, counter=[0, k, 0, 0])
    draws = np.random.Generator(bit_gen).standard_normal(6 * dim)
    return draws[:3 * dim].reshape(dim, 3), draws[3 * dim:].reshape(dim, 3)


def sample_fine(seed: int, steps: int, dim: int, h_fine: float = 1.0, start: int = 0) -> NoisePath:
    """
    Generate a fine noise path.

    Args:
        seed: generator key
        steps: number of fine steps (>= 1)
        dim: number of particles
        h_fine: fine step size
        start: index of the first step, for extending a path in chunks

    Returns:
        NoisePath with eta/zeta of shape (steps, dim, 3)
    """
    if steps < 1:
        raise NoiseError(f"A noise path needs at least one step, got {steps}")
    eta = np.empty((steps, dim, 3))
    zeta = np.empty((steps, dim, 3))
    for k in range(steps):
        eta[k], zeta[k] = fine_step_noise(seed, start + k, dim)
    eta.setflags(write=False)
    zeta.setflags(write=False)
    return NoisePath(seed=int(seed), h_fine=float(h_fine), steps=steps, dim=dim, eta=eta, zeta=zeta, start=start)


def _coarsen_arrays(eta1, zeta1, eta2, zeta2, h: float) -> Tuple[np.ndarray, np.ndarray]:
    integral = h ** 1.5 * ((0.5 * eta1 + zeta1 / (2.0 * SQRT3)) + (0.5 * eta2 + zeta2 / (2.0 * SQRT3)))
    integral = integral + h * (math.sqrt(h) * eta1)
    eta_c = (eta1 + eta2) / SQRT2
    zeta_c = 2.0 * SQRT3 * integral / (2.0 * h) ** 1.5 - SQRT3 * eta_c
    return eta_c, zeta_c


def coarsen(a: StepNoise, b: StepNoise) -> StepNoise:
    """
    Combine two consecutive steps of size h into one step of size 2h.

    With I_k = h^(3/2) (eta_k/2 + zeta_k/(2 sqrt 3)) and dW_1 = sqrt(h) eta_1:
    eta_c = (eta_1 + eta_2)/sqrt 2, I_c = I_1 + I_2 + h dW_1 and
    zeta_c = 2 sqrt 3 I_c / (2h)^(3/2) - sqrt 3 eta_c.

    Args:
        a: earlier step
        b: later step

    Returns:
        StepNoise of size 2h
    """
    if not math.isclose(a.dt, b.dt, rel_tol=1e-12, abs_tol=0.0):
        raise NoiseError(f"Cannot coarsen steps of different sizes ({a.dt} vs {b.dt})")
    eta_c, zeta_c = _coarsen_arrays(a.eta, a.zeta, b.eta, b.zeta, a.dt)
    return StepNoise(eta_c, zeta_c, 2.0 * a.dt)


def ladder_arrays(path: NoisePath, level: int) -> Tuple[np.ndarray, np.ndarray, float]:
    """(eta, zeta, dt) arrays for ladder level `level`"""
    if level < 0:
        raise NoiseError(f"Ladder level must be non-negative, got {level}")
    if path.steps % (1 << level):
        raise NoiseError(f"{path.steps} fine steps are not divisible by 2^{level}")
    eta, zeta, h = path.eta, path.zeta, path.h_fine
    for _ in range(level):
        eta, zeta = _coarsen_arrays(eta[0::2], zeta[0::2], eta[1::2], zeta[1::2], h)
        h = 2.0 * h
    return eta, zeta, h


def coarsen_ladder(path: NoisePath, level: int) -> List[StepNoise]:
    """
    Step noise at step size 2^level * h_fine, built by repeated pairwise coarsening.

    Raises:
        NoiseError: if the path length is not divisible by 2^level
    """
    eta, zeta, h = ladder_arrays(path, level)
    return [StepNoise(eta[k], zeta[k], h) for k in range(eta.shape[0])]


def _ou_weights(n_fine: int, h: float, gamma: float) -> np.ndarray:
    # weight of fine step j: exp(-gamma (t_end - s_{j+1}))
    lags = (n_fine - 1 - np.arange(n_fine)) * h
    weights = np.exp(-gamma * lags)
    return weights / math.sqrt(float(np.sum(weights * weights)))


def ou_noise(path: NoisePath, t0: float, dt: float, gamma: float) -> np.ndarray:
    """
    Normalized discrete stochastic convolution over [t0, t0 + dt].

    xi = sum_j exp(-gamma (t_end - s_{j+1})) sqrt(h) eta_j
         / sqrt(sum_j exp(-2 gamma (t_end - s_{j+1})) h)

    so xi has unit variance; one fine step gives xi = eta.

    Raises:
        NoiseError: if the window is not aligned with the fine grid
    """
    h = path.h_fine
    k0 = t0 / h - path.start
    n_fine = dt / h
    if (abs(k0 - round(k0)) > 1e-9 or abs(n_fine - round(n_fine)) > 1e-9
            or round(n_fine) < 1 or round(k0) < 0 or round(k0 + n_fine) > path.steps):
        raise NoiseError(f"Window [{t0}, {t0 + dt}] is not aligned with the fine grid (h={h})")
    k0, n_fine = int(round(k0)), int(round(n_fine))
    weights = _ou_weights(n_fine, h, gamma)
    return np.tensordot(weights, path.eta[k0:k0 + n_fine], axes=(0, 0))


def ou_noise_ladder(path: NoisePath, level: int, gamma: float) -> np.ndarray:
    """xi for every coarse step of a ladder level, shape (steps / 2^level, dim, 3)"""
    block = 1 << level
    if path.steps % block:
        raise NoiseError(f"{path.steps} fine steps are not divisible by 2^{level}")
    weights = _ou_weights(block, path.h_fine, gamma)
    eta = path.eta.reshape(path.steps // block, block, path.dim, 3)
    return np.tensordot(eta, weights, axes=(1, 0))


def moment_check(eta: np.ndarray, zeta: np.ndarray) -> dict:
    """
    Sample moments of the normalized increment and time integral.

    Returns a dict of (estimate, standard error, expected) for E[dW^2]/dt,
    E[dW I]/dt^2 and E[I^2]/dt^3.
    """
    dw = eta.reshape(-1)
    integral = 0.5 * dw + zeta.reshape(-1) / (2.0 * SQRT3)
    samples = {
        "dW2": (dw * dw, 1.0),
        "dWI": (dw * integral, 0.5),
        "I2": (integral * integral, 1.0 / 3.0),
    }
    out = {}
    for name, (values, expected) in samples.items():
        out[name] = (float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size)), expected)
    return out

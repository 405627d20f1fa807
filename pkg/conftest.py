# conftest.py - shared pytest fixtures
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flow_lattice import FlowMatrix, build_lattice  # noqa: E402
from harness import ExperimentConfig  # noqa: E402
from integrators import SimParams  # noqa: E402
from potential import WCA_CUTOFF, ForceField  # noqa: E402

UNIAXIAL_FLOW = (0.2, -0.1, -0.1)


@pytest.fixture
def flow():
    return FlowMatrix(np.array(UNIAXIAL_FLOW))


@pytest.fixture
def lattice15():
    """15 x 15 x 15 cell under uniaxial extension"""
    return build_lattice(15.0, UNIAXIAL_FLOW)


@pytest.fixture
def ideal_params(flow):
    return SimParams(gamma=1.0, beta=1.0, flow=flow)


@pytest.fixture
def small_config():
    """27 WCA particles, a single 16-step checkpoint, quick equilibration"""
    return ExperimentConfig(
        n_particles=27,
        box_length=4.5,
        dt_base=1e-3,
        sim_time=0.016,
        eq_time=0.01,
        runs=2,
        ladder_levels=5,
        schemes=("em", "se_b"),
        seed=7,
    )


def jittered_sublattice(per_side: int, spacing: float, jitter: float, seed: int) -> np.ndarray:
    """Sublattice positions displaced uniformly by up to +-jitter per axis"""
    rng = np.random.default_rng(seed)
    grid = np.indices((per_side,) * 3).reshape(3, -1).T
    return (grid + 0.5) * spacing + rng.uniform(-jitter, jitter, size=grid.shape)


@pytest.fixture
def wca_system():
    """64 jittered particles in a 5.0 cell: (q, lattice, ForceField)"""
    q = jittered_sublattice(4, 1.25, 0.15, seed=3)
    lattice = build_lattice(5.0, UNIAXIAL_FLOW, cutoff=WCA_CUTOFF)
    return q, lattice, ForceField(use_cells=True)


SMALL_CONFIG_TEXT = """\
# quick run
time_step = 1e-3
simulation_time = 0.016
number_of_particles = 27
simulation_box_side_length = 4.5
flow_rates = 0.2, -0.1, -0.1
equilibration_time = 0.01
runs = 2
schemes = em, se_b
seed = 7
"""


@pytest.fixture
def small_cfg_file(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CONFIG_TEXT, encoding="utf-8")
    return path

# storage.py - Output files: CSV reports, manifests, snapshots and noise dumps
"""
Output Storage

Everything the CLI writes goes through here:
- Output directory resolution (--out-dir flag, then NELD_OUT_DIR, then ./output_data)
- Report CSVs written with pandas
- Run manifests, written atomically (temp file + rename)
- Plain-text state snapshots with 17 significant digits
- Binary NoisePath dumps for cross-implementation comparison

Key Functions:
- resolve_out_dir(), save_report_csv(), write_manifest()
- write_snapshot() / read_snapshot()
- dump_noise() / load_noise()
"""

import logging
import os
import struct
from dataclasses import dataclass, field
from io import BytesIO
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from flow_lattice import DeformingLattice, lattice_at
from integrators import SystemState
from noise import NoiseError, NoisePath

logger = logging.getLogger(__name__)

DEFAULT_OUT_DIR = Path("output_data")
OUT_DIR_ENV = "NELD_OUT_DIR"
CSV_SCHEMA_VERSION = 1
NOISE_HEADER = struct.Struct("<QdQQQ")


def resolve_out_dir(flag: Optional[str] = None) -> Path:
    """Output directory: explicit flag, then NELD_OUT_DIR, then ./output_data"""
    if flag:
        return Path(flag)
    env = os.getenv(OUT_DIR_ENV)
    if env:
        return Path(env)
    return DEFAULT_OUT_DIR


def save_output_to_disk(data: BytesIO, path: Path) -> Tuple[bool, str]:
    """Save BytesIO content to disk"""
    try:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data.seek(0)
        with open(path, "wb") as f:
            f.write(data.read())
        return True, str(path)
    except OSError as e:
        logger.error(f"Error writing {path}: {str(e)}")
        return False, f"Error writing {path}: {str(e)}"


def load_output_from_disk(path: Path) -> Optional[BytesIO]:
    """Load a file from disk as BytesIO"""
    path = Path(path)
    if not path.exists():
        return None

    raw = path.read_bytes()
    if not raw:
        return None

    buf = BytesIO(raw)
    buf.seek(0)
    return buf


def save_report_csv(df: pd.DataFrame, out_dir: Path, name: str) -> Tuple[bool, str]:
    """
    Write a report frame as <out_dir>/<name>.csv.

    Floats are written with repr precision so identical runs give identical bytes.

    Returns:
        (success, path or error message)
    """
    path = Path(out_dir) / f"{name}.csv"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False, float_format="%.17g")
        logger.info(f"Wrote {path} ({len(df)} rows)")
        return True, str(path)
    except OSError as e:
        logger.error(f"Error writing {path}: {str(e)}")
        return False, f"Error writing {path}: {str(e)}"


@dataclass
class RunManifest:
    """
    Metadata that makes a run reproducible.

    Attributes:
        command: CLI subcommand
        config_text: configuration echo in the file format
        seed: experiment seed
        version: code version string
        wall_time: seconds spent
        failures: (scheme, run, message) for excluded runs
        outputs: paths of the files written
        notes: extra key/value lines
    """
    command: str
    config_text: str
    seed: int
    version: str
    wall_time: float = 0.0
    failures: List[Tuple[str, int, str]] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    notes: Dict[str, str] = field(default_factory=dict)

    def render(self) -> str:
        lines = [
            f"command = {self.command}",
            f"version = {self.version}",
            f"csv_schema_version = {CSV_SCHEMA_VERSION}",
            f"seed = {self.seed}",
            f"wall_time = {self.wall_time:.3f}",
        ]
        for key, value in self.notes.items():
            lines.append(f"{key} = {value}")
        for line in self.config_text.splitlines():
            if line.strip():
                lines.append(f"config.{line}")
        lines.append(f"failures = {len(self.failures)}")
        for scheme, run, message in self.failures:
            lines.append(f"failure = {scheme} run {run}: {message}")
        for path in self.outputs:
            lines.append(f"output = {path}")
        return "\n".join(lines) + "\n"


def write_manifest(manifest: RunManifest, out_dir: Path, name: str = "manifest.txt") -> Tuple[bool, str]:
    """Atomically write the manifest; every referenced output must exist"""
    missing = [p for p in manifest.outputs if not Path(p).exists()]
    if missing:
        return False, f"Manifest references missing outputs: {missing}"
    path = Path(out_dir) / name
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_text(manifest.render(), encoding="utf-8")
        os.replace(tmp, path)
        logger.info(f"Wrote manifest {path}")
        return True, str(path)
    except OSError as e:
        logger.error(f"Error writing manifest {path}: {str(e)}")
        return False, f"Error writing manifest {path}: {str(e)}"


def config_from_manifest(text: str) -> str:
    """Configuration echo embedded in a manifest"""
    prefix = "config."
    return "".join(line[len(prefix):] + "\n" for line in text.splitlines() if line.startswith(prefix))


# ----------------------------------------------------------------------
# Snapshots
# ----------------------------------------------------------------------
def format_snapshot(state: SystemState, lattice: DeformingLattice) -> str:
    """Header 't L_x L_y L_z N', then 'qx qy qz px py pz' per particle"""
    L = lattice_at(lattice, state.t)
    lines = [" ".join(f"{v:.17g}" for v in (state.t, *L)) + f" {state.n_particles}"]
    rows = np.hstack([state.q, state.p])
    for row in rows:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def write_snapshot(path: Path, state: SystemState, lattice: DeformingLattice) -> Tuple[bool, str]:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(format_snapshot(state, lattice), encoding="utf-8")
        logger.info(f"Wrote snapshot {path} (t={state.t:g})")
        return True, str(path)
    except OSError as e:
        logger.error(f"Error writing snapshot {path}: {str(e)}")
        return False, f"Error writing snapshot {path}: {str(e)}"


def read_snapshot(path: Path) -> Tuple[SystemState, np.ndarray]:
    """
    Load a snapshot.

    Returns:
        (state, edges) where edges are the cell edges from the header

    Raises:
        ValueError: malformed header or particle count mismatch
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split()
    if len(header) != 5:
        raise ValueError(f"{path}: snapshot header needs 't L_x L_y L_z N', got '{lines[0]}'")
    t = float(header[0])
    edges = np.array([float(v) for v in header[1:4]])
    n = int(header[4])
    body = [line for line in lines[1:] if line.strip()]
    if len(body) != n:
        raise ValueError(f"{path}: header announces {n} particles, found {len(body)} rows")
    data = np.array([[float(v) for v in line.split()] for line in body]).reshape(n, 6)
    return SystemState(data[:, :3].copy(), data[:, 3:].copy(), t), edges


# ----------------------------------------------------------------------
# Noise dumps
# ----------------------------------------------------------------------
def noise_to_bytes(path: NoisePath) -> BytesIO:
    """Header (seed <u8, h_fine <f8, steps <u8, dim <u8, start <u8), then eta and zeta as little-endian float64"""
    buf = BytesIO()
    buf.write(NOISE_HEADER.pack(path.seed, path.h_fine, path.steps, path.dim, path.start))
    buf.write(np.ascontiguousarray(path.eta, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(path.zeta, dtype="<f8").tobytes())
    buf.seek(0)
    return buf


def noise_from_bytes(buf: BytesIO) -> NoisePath:
    raw = buf.getvalue()
    if len(raw) < NOISE_HEADER.size:
        raise NoiseError("Noise dump is shorter than its header")
    seed, h_fine, steps, dim, start = NOISE_HEADER.unpack_from(raw, 0)
    count = steps * dim * 3
    expected = NOISE_HEADER.size + 2 * 8 * count
    if len(raw) != expected:
        raise NoiseError(f"Noise dump has {len(raw)} bytes, expected {expected}")
    values = np.frombuffer(raw, dtype="<f8", offset=NOISE_HEADER.size).astype(float)
    eta = values[:count].reshape(steps, dim, 3)
    zeta = values[count:].reshape(steps, dim, 3)
    eta.setflags(write=False)
    zeta.setflags(write=False)
    return NoisePath(seed=seed, h_fine=h_fine, steps=steps, dim=dim, eta=eta, zeta=zeta, start=start)


def dump_noise(path: Path, noise_path: NoisePath) -> Tuple[bool, str]:
    return save_output_to_disk(noise_to_bytes(noise_path), Path(path))


def load_noise(path: Path) -> NoisePath:
    buf = load_output_from_disk(Path(path))
    if buf is None:
        raise NoiseError(f"No noise dump at {path}")
    return noise_from_bytes(buf)

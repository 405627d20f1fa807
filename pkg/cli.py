# cli.py - Command-line front end for convergence and truncation experiments
"""
NELD Convergence CLI

Subcommands:
- converge:   coupled ladder runs -> <scheme>.csv, summary.csv, manifest.txt
- truncation: one-step error slope -> truncation_<scheme>.csv, manifest.txt
- snapshot:   equilibrated state and level-0 trajectory states as text snapshots
- noise-dump: the fine Brownian path of one run in the binary dump format

Exit codes:
    0  success
    1  partial success (some runs excluded)
    2  invalid configuration or arguments
    3  contract violation or unwritable output

Example:
    python cli.py converge --config desk.cfg --scheme em,se_b --threads 4
"""

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import harness
import storage
from config import ConfigError, apply_overrides, config_echo, load_config
from flow_lattice import BlowUpError, wrap
from integrators import ReferenceContractError, SchemeId, SystemState, get_stepper
from noise import sample_fine
from potential import OverlapError

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2
EXIT_CONTRACT = 3
TIME_TOL = 1e-9


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neld", description="Strong convergence experiments for NELD integrators")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument("--config", required=True, help="flat key = value configuration file")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out-dir", help="output directory (default: $NELD_OUT_DIR or ./output_data)")
        p.add_argument("--quiet", action="store_true", help="warnings only, no progress bar")

    converge = sub.add_parser("converge", help="coupled step-size ladder runs")
    common(converge)
    converge.add_argument("--scheme", help="comma-separated schemes (default: from the config)")
    converge.add_argument("--runs", type=int, help="override the number of runs")
    converge.add_argument("--threads", type=int, default=1, help="worker threads over runs")

    truncation = sub.add_parser("truncation", help="one-step error slope")
    common(truncation)
    truncation.add_argument("--scheme", required=True, help="scheme to test")
    truncation.add_argument("--crossing", action="store_true", help="compare with the corrected twin on a crossing state")
    truncation.add_argument("--deterministic-noise", action="store_true", help="set eta = zeta = 0")

    snapshot = sub.add_parser("snapshot", help="write text snapshots of one run")
    common(snapshot)
    snapshot.add_argument("--times", default="0", help="comma-separated snapshot times")
    snapshot.add_argument("--scheme", help="integrator for t > 0 (default: first configured scheme)")
    snapshot.add_argument("--run", type=int, default=0, help="run index")

    dump = sub.add_parser("noise-dump", help="write the fine noise path of one run")
    common(dump)
    dump.add_argument("--run", type=int, default=0, help="run index")
    return parser


def _configure_logging(quiet: bool):
    logging.getLogger().setLevel(logging.WARNING if quiet else logging.INFO)


def _manifest(command: str, config: harness.ExperimentConfig, started: float) -> storage.RunManifest:
    return storage.RunManifest(
        command=command,
        config_text=config_echo(config),
        seed=config.seed,
        version=harness.__version__,
        wall_time=time.perf_counter() - started,
    )


def _finish(manifest: storage.RunManifest, out_dir: Path, code: int) -> int:
    ok, message = storage.write_manifest(manifest, out_dir)
    if not ok:
        logger.error(message)
        return EXIT_CONTRACT
    return code


def _parse_scheme(name: str) -> SchemeId:
    try:
        return SchemeId.parse(name)
    except ValueError as e:
        raise ConfigError(f"--scheme: {str(e)}") from e


def _check_run(run: int):
    if run < 0:
        raise ConfigError(f"--run must be non-negative, got {run}")


def cmd_converge(args) -> int:
    """Run convergence_experiment and write one CSV per scheme plus a summary"""
    started = time.perf_counter()
    config = apply_overrides(load_config(args.config), runs=args.runs, seed=args.seed, schemes=args.scheme)
    out_dir = storage.resolve_out_dir(args.out_dir)

    report = harness.convergence_experiment(config, threads=max(1, args.threads), progress=not args.quiet)

    manifest = _manifest("converge", config, started)
    manifest.notes["ord_definition"] = "raw log2(e_2h/e_h) per checkpoint; summary uses the time-median over the second half"
    manifest.notes["error_statistics"] = "mean and rms over runs"
    for name in report.schemes:
        ok, message = storage.save_report_csv(report.to_frame(name), out_dir, name)
        if not ok:
            logger.error(message)
            return EXIT_CONTRACT
        manifest.outputs.append(message)
    ok, message = storage.save_report_csv(report.summary(), out_dir, "summary")
    if not ok:
        logger.error(message)
        return EXIT_CONTRACT
    manifest.outputs.append(message)

    manifest.failures = report.failures
    manifest.wall_time = time.perf_counter() - started
    code = EXIT_PARTIAL if report.failures else EXIT_OK
    if report.failures:
        logger.warning(f"{len(report.failures)} scheme runs excluded")
    return _finish(manifest, out_dir, code)


def cmd_truncation(args) -> int:
    """Fit the one-step error slope of a scheme and write the (dt, error) table"""
    started = time.perf_counter()
    config = apply_overrides(load_config(args.config), seed=args.seed)
    out_dir = storage.resolve_out_dir(args.out_dir)
    scheme = _parse_scheme(args.scheme)

    try:
        result = harness.truncation_experiment(config, scheme, crossing=args.crossing,
                                               deterministic=args.deterministic_noise)
    except ReferenceContractError as e:
        logger.error(f"Truncation test aborted: {str(e)}")
        return EXIT_CONTRACT
    except ValueError as e:
        raise ConfigError(str(e)) from e

    frame = result.to_frame()
    frame["slope"] = result.slope
    frame["residual"] = result.residual
    frame["expected_slope"] = result.expected_slope
    name = f"truncation_{scheme.key}" + ("_crossing" if args.crossing else "") + \
        ("_deterministic" if args.deterministic_noise else "")
    ok, message = storage.save_report_csv(frame, out_dir, name)
    if not ok:
        logger.error(message)
        return EXIT_CONTRACT

    manifest = _manifest("truncation", config, started)
    manifest.notes.update({
        "scheme": scheme.key,
        "crossing": str(args.crossing).lower(),
        "deterministic_noise": str(args.deterministic_noise).lower(),
        "slope": f"{result.slope:.6f}",
        "expected_slope": f"{result.expected_slope:g}",
        "residual": f"{result.residual:.6f}",
    })
    manifest.outputs.append(message)
    return _finish(manifest, out_dir, EXIT_OK)


def _parse_times(text: str, config: harness.ExperimentConfig) -> List[float]:
    try:
        times = sorted({float(v) for v in text.split(",") if v.strip()})
    except ValueError as e:
        raise ConfigError(f"--times: {str(e)}") from e
    if not times:
        raise ConfigError("--times: no snapshot times given")
    for t in times:
        steps = t / config.dt_base
        if t < 0.0 or t > config.sim_time * (1.0 + TIME_TOL) or abs(steps - round(steps)) > TIME_TOL * max(1.0, steps):
            raise ConfigError(f"--times: {t} is not a step of the dt={config.dt_base:g} grid within [0, {config.sim_time}]")
    return times


def cmd_snapshot(args) -> int:
    """Write snapshots of run `--run` at the requested times on the dt_base grid"""
    started = time.perf_counter()
    config = apply_overrides(load_config(args.config), seed=args.seed)
    out_dir = storage.resolve_out_dir(args.out_dir)
    times = _parse_times(args.times, config)
    _check_run(args.run)
    scheme = _parse_scheme(args.scheme) if args.scheme else config.scheme_ids()[0]
    lattice = harness.build_lattice(config)
    params = harness.build_params(config)

    run_seed = harness.derive_seed(config.seed, args.run)
    state = harness.equilibrate(config, run_seed)
    steps = int(round(max(times) / config.dt_base))
    path = sample_fine(harness.derive_seed(run_seed, 4), steps, config.n_particles, config.dt_base) if steps else None
    stepper = get_stepper(scheme)

    manifest = _manifest("snapshot", config, started)
    manifest.notes.update({"scheme": scheme.key, "run": str(args.run)})
    k = 0
    for t in times:
        target = int(round(t / config.dt_base))
        while k < target:
            state = stepper(state, params, lattice, path.step(k), config.dt_base)
            state = SystemState(state.q, state.p, (k + 1) * config.dt_base)
            k += 1
        q, p, _ = wrap(state.q, state.p, lattice, state.t)
        ok, message = storage.write_snapshot(out_dir / f"snapshot_{scheme.key}_run{args.run}_t{t:.6g}.txt",
                                             SystemState(q, p, state.t), lattice)
        if not ok:
            logger.error(message)
            return EXIT_CONTRACT
        manifest.outputs.append(message)
    return _finish(manifest, out_dir, EXIT_OK)


def cmd_noise_dump(args) -> int:
    """Write the fine noise path used by run `--run` of a convergence experiment"""
    started = time.perf_counter()
    config = apply_overrides(load_config(args.config), seed=args.seed)
    out_dir = storage.resolve_out_dir(args.out_dir)
    _check_run(args.run)
    path = harness.ConvergenceRunner(config).noise_path(args.run)
    ok, message = storage.dump_noise(out_dir / f"noise_run{args.run}.bin", path)
    if not ok:
        logger.error(message)
        return EXIT_CONTRACT
    manifest = _manifest("noise-dump", config, started)
    manifest.notes["run"] = str(args.run)
    manifest.outputs.append(message)
    return _finish(manifest, out_dir, EXIT_OK)


COMMANDS = {
    "converge": cmd_converge,
    "truncation": cmd_truncation,
    "snapshot": cmd_snapshot,
    "noise-dump": cmd_noise_dump,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    _configure_logging(args.quiet)

    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        logger.error(f"Configuration error: {str(e)}")
        return EXIT_CONFIG
    except (BlowUpError, OverlapError, ReferenceContractError) as e:
        logger.error(f"Simulation failed: {str(e)}")
        return EXIT_CONTRACT
    except OSError as e:
        logger.error(f"I/O error: {str(e)}")
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())

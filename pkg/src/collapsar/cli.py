"""Command-line interface for collapse-model runs"""

import functools
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import click
import numpy as np
import structlog
from rich.console import Console
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

from . import __version__
from .analytics import (QMUPL_M0, asymptotic_spread_si, fit_report, lambda_for_mass, pheno_tables,
                        trajectory_variance_si)
from .config import (OUTPUT_FORMATS, PRESETS, MeasurementSection, RunConfig, build_hamiltonian,
                     build_initial_state, build_sampler, load_config, outcome_weights, preset, resolve_workers)
from .core import NoiseStream, ParticleSpec, SpatialGrid, gaussian_state
from .csl import LatticeFockSpace, fock_density, ground_state, hopping_hamiltonian, lattice_energy_slope
from .ensemble import EnsembleStats, martingale_check, run_ensemble
from .errors import CollapsarError, ConfigurationError, UnitError
from .grw import apply_jump
from .hamiltonian import HamiltonianSpec
from .lindblad import (DensityOperator, LindbladGenerator, coherence_closed_form, evolve_lindblad, lindblad_series,
                       trace_distance)
from .measurement import born_report
from .qmupl import (QmuplConfig, born_statistics, gaussian_width_oracle, run_qmupl_trajectory, stationary_width,
                    width_moments)
from .reporter import RunWriter, to_json

# Configure structured logging
structlog.configure(
    processors=[
        structlog.stdlib.filter_by_level,
        structlog.stdlib.add_logger_name,
        structlog.stdlib.add_log_level,
        structlog.stdlib.PositionalArgumentsFormatter(),
        structlog.processors.TimeStamper(fmt="iso"),
        structlog.processors.StackInfoRenderer(),
        structlog.processors.format_exc_info,
        structlog.dev.ConsoleRenderer()
    ],
    context_class=dict,
    logger_factory=structlog.stdlib.LoggerFactory(),
    cache_logger_on_first_use=True,
)

logger = structlog.get_logger()
console = Console()
err_console = Console(stderr=True)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_ACCEPTANCE = 3

RECORD_FILES = {"grw": "jumps.ndjson", "measurement": "outcomes.ndjson", "qmupl": "outcomes.ndjson",
                "csl": "occupations.ndjson"}


def _exit_on_error(func: Callable) -> Callable:
    """Map library errors to exit codes with a diagnostic on stderr"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (ConfigurationError, UnitError) as e:
            err_console.print(f"[bold red]Configuration error:[/bold red] {e}")
            sys.exit(EXIT_CONFIG)
        except (CollapsarError, FloatingPointError, np.linalg.LinAlgError) as e:
            err_console.print(f"[bold red]Numerical failure:[/bold red] {type(e).__name__}: {e}")
            logger.error("Run failed", error_type=type(e).__name__)
            sys.exit(EXIT_NUMERICAL)
    return wrapper


def _run_options(func: Callable) -> Callable:
    options = [
        click.option('--config', '-c', 'config_path', type=click.Path(path_type=Path),
                     help='Run configuration (JSON or YAML)'),
        click.option('--preset', 'preset_name', type=click.Choice(sorted(PRESETS)), help='Start from a named preset'),
        click.option('--seed', type=int, help='Master seed (overrides the configuration)'),
        click.option('--workers', '-w', type=int, help='Worker processes (default: COLLAPSAR_WORKERS or 1)'),
        click.option('--out', '-o', type=click.Path(path_type=Path), help='Output directory'),
        click.option('--format', '-f', 'formats', multiple=True, type=click.Choice(list(OUTPUT_FORMATS)),
                     help='Output formats to write (repeatable)'),
        click.option('--gzip', 'compress', is_flag=True, help='Write gzip-compressed files'),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _prepare(config_path: Optional[Path], preset_name: Optional[str], seed: Optional[int],
             n: Optional[int] = None, default_preset: Optional[str] = None) -> RunConfig:
    if config_path is not None:
        config = load_config(config_path)
    elif preset_name or default_preset:
        config = preset(preset_name or default_preset)
    else:
        raise ConfigurationError("no configuration given", ["--config or --preset is required"])
    if seed is not None:
        config.ensemble.master_seed = seed
    if n is not None:
        config.ensemble.n = n
    config.validate()
    return config


def _run(config: RunConfig, n: int, workers: Optional[int], out: Optional[Path], formats: Tuple[str, ...],
         compress: bool) -> Tuple[EnsembleStats, Dict[str, Any], Dict[str, Path]]:
    """Build the sampler, run the ensemble with a progress bar and write the run directory"""
    sampler = build_sampler(config)
    workers = resolve_workers(workers, config)
    seed = config.ensemble.master_seed
    logger.info("Starting run", model=config.model, n=n, seed=seed, workers=workers)

    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TimeElapsedColumn(),
        console=err_console
    ) as progress:
        task = progress.add_task(f"{config.model} ensemble", total=None)
        stats = run_ensemble(sampler, n, seed, workers, config.ensemble.chunk_size,
                             progress_callback=lambda done, total: progress.update(task, completed=done,
                                                                                   total=total))

    summary = _summary(config, stats)
    manifest = config.manifest_dict()
    manifest["sampler"] = sampler.describe()
    manifest["n"] = n
    writer = RunWriter(out or Path(config.output.directory), compress or config.output.gzip)
    written = writer.write_run(manifest, stats, list(formats) or config.output.formats,
                               RECORD_FILES.get(config.model), summary)
    return stats, summary, written


def _summary(config: RunConfig, stats: EnsembleStats) -> Dict[str, Any]:
    summary: Dict[str, Any] = {}
    weights = outcome_weights(config)
    if weights is None or not stats.records:
        return summary
    if config.model == "measurement":
        summary["born"] = born_report(stats.records, weights)
    else:
        summary["born"] = born_statistics(stats.records, weights)
    return summary


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='Enable verbose output')
@click.option('--debug', is_flag=True, help='Enable debug output')
@click.version_option(__version__, prog_name="collapsar")
def main(verbose: bool, debug: bool):
    """Collapse-model trajectory simulation and verification"""
    if debug:
        logging.basicConfig(level=logging.DEBUG)
    elif verbose:
        logging.basicConfig(level=logging.INFO)
    else:
        logging.basicConfig(level=logging.WARNING)


@main.command()
@_run_options
@_exit_on_error
def run(config_path, preset_name, seed, workers, out, formats, compress):
    """Integrate a single trajectory (index 0)"""
    config = _prepare(config_path, preset_name, seed)
    stats, _, written = _run(config, 1, workers, out, formats, compress)
    _display_written(written)


@main.command()
@_run_options
@click.option('--n', 'n', type=int, help='Number of trajectories (overrides the configuration)')
@_exit_on_error
def ensemble(config_path, preset_name, seed, workers, out, formats, compress, n):
    """Run an ensemble of trajectories and write its statistics"""
    config = _prepare(config_path, preset_name, seed, n)
    stats, summary, written = _run(config, config.ensemble.n, workers, out, formats, compress)
    _display_stats(stats)
    if "born" in summary:
        _display_born(summary["born"])
    _display_written(written)


@main.command()
@_run_options
@click.option('--n', 'n', type=int, help='Number of trajectories')
@click.option('--weight-plus', type=float, help='|a|^2 of the measured micro state')
@_exit_on_error
def measure(config_path, preset_name, seed, workers, out, formats, compress, n, weight_plus):
    """Pointer measurement ensemble with Born-rule statistics"""
    config = _prepare(config_path, preset_name, seed, n, default_preset="pointer_default")
    if config.model != "measurement":
        raise ConfigurationError("measure needs a measurement configuration", ["model: must be 'measurement'"])
    if config.measurement is None:
        config.measurement = MeasurementSection()
    if weight_plus is not None:
        config.measurement.weight_plus = weight_plus
        config.validate()
    stats, summary, written = _run(config, config.ensemble.n, workers, out, formats, compress)
    _display_born(summary.get("born", {}))
    _display_written(written)


@main.command('lindblad-compare')
@_run_options
@click.option('--n', 'n', type=int, help='Number of trajectories')
@click.option('--tolerance', type=float, default=0.02, show_default=True,
              help='Largest acceptable trace distance')
@_exit_on_error
def lindblad_compare(config_path, preset_name, seed, workers, out, formats, compress, n, tolerance):
    """Compare the QMUPL ensemble with the master-equation solution"""
    config = _prepare(config_path, preset_name, seed, n)
    if config.model != "qmupl" or len(config.particles) != 1:
        raise ConfigurationError("lindblad-compare needs a single-particle qmupl configuration")
    stats, _, written = _run(config, config.ensemble.n, workers, out, formats, compress)

    sampler = build_sampler(config)
    qc = sampler.config
    rho0 = DensityOperator.pure(build_initial_state(config))
    times, reference, states = lindblad_series(rho0, build_hamiltonian(config), qc.lambdas, qc.dt, qc.n_steps,
                                               qc.output_every)
    ensemble_states = sampler.density_series(config.ensemble.n, config.ensemble.master_seed,
                                             config.ensemble.chunk_size)
    distances = [trace_distance(a, b) for a, b in zip(ensemble_states, states)]

    reference_means = {name: reference[name] for name in ("mean_q", "mean_p", "energy")}
    comparison = {
        "times": times.tolist(),
        "trace_distance": distances,
        "max_trace_distance": max(distances),
        "tolerance": tolerance,
        "passed": max(distances) <= tolerance,
        "martingale": martingale_check(stats, reference_means),
    }
    writer = RunWriter(out or Path(config.output.directory), compress or config.output.gzip)
    written["rho"] = writer.write_density(states[-1])
    written["rho_ensemble"] = writer.write_density(ensemble_states[-1], "rho_ensemble.csv")
    written["comparison"] = writer.write_json("comparison.json", comparison)

    table = Table(title="Ensemble vs master equation")
    table.add_column("t", justify="right")
    table.add_column("Trace distance", justify="right")
    for t, d in zip(times, distances):
        table.add_row(f"{t:.4g}", f"{d:.4f}")
    console.print(table)
    verdict = "[green]within[/green]" if comparison["passed"] else "[red]outside[/red]"
    console.print(f"Maximum trace distance {max(distances):.4f} {verdict} tolerance {tolerance}")
    _display_written(written)


@main.command()
@click.option('--mass-kg', type=float, required=True, help='Body mass in kg')
@click.option('--time-s', type=float, help='Time for the trajectory-variance prediction')
@click.option('--format', 'fmt', type=click.Choice(['text', 'json']), default='text')
@_exit_on_error
def predict(mass_kg: float, time_s: Optional[float], fmt: str):
    """SI-scale predictions for a free body"""
    result: Dict[str, Any] = {
        "mass_kg": mass_kg,
        "asymptotic_spread_m": asymptotic_spread_si(mass_kg),
        "lambda_cm": lambda_for_mass(mass_kg),
        "lambda_cm_over_lambda0": mass_kg / QMUPL_M0,
        "fit": fit_report(),
    }
    if time_s is not None:
        result["trajectory_variance"] = {"time_s": time_s, **trajectory_variance_si(mass_kg, time_s).to_dict()}
    if fmt == 'json':
        click.echo(to_json(result), nl=False)
        return
    click.echo(f"asymptotic spread: {result['asymptotic_spread_m']:.2g} m")
    click.echo(f"lambda_CM: {result['lambda_cm']:.3g} m^-2 s^-1 ({result['lambda_cm_over_lambda0']:.3g} lambda0)")
    if time_s is not None:
        v = result["trajectory_variance"]
        click.echo(f"V[<Q>] at {time_s:g} s: {v['value']:.2g} m^2 ({v['regime']} regime)")


@main.command()
@click.option('--mass-kg', 'masses', type=float, multiple=True, help='Add computed rows for this mass')
@click.option('--format', 'fmt', type=click.Choice(['text', 'json']), default='text')
@_exit_on_error
def tables(masses: Tuple[float, ...], fmt: str):
    """Phenomenology tables with provenance tags"""
    table = pheno_tables(masses)
    if fmt == 'json':
        click.echo(table.to_json(), nl=False)
        return
    out = Table(title="Collapse phenomenology")
    out.add_column("Quantity", style="cyan")
    out.add_column("Value", justify="right")
    out.add_column("Units")
    out.add_column("Source", style="dim")
    for row in table.rows:
        value = f"{row.value:.3g}"
        if row.uncertainty_decades:
            value += f" (±{row.uncertainty_decades} dec)"
        out.add_row(row.label, value, row.units, row.source)
    console.print(out)


def _selftest_checks() -> List[Tuple[str, Callable[[], Tuple[bool, str]]]]:
    def coherence():
        grid = SpatialGrid(-2.0, 2.0, 16)
        rho0 = DensityOperator.pure(gaussian_state(grid, 0.0, 0.8))
        gen = LindbladGenerator.for_grid(grid, HamiltonianSpec.none(), [1.0])
        _, states = evolve_lindblad(rho0, gen, 1e-3, 500)
        exact = coherence_closed_form(rho0, 1.0, 0.5).matrix
        err = float(np.max(np.abs(states[-1].matrix - exact) / np.maximum(np.abs(exact), 1e-300)))
        return err < 1e-6, f"max relative error {err:.2e}"

    def si_values():
        pairs = [(asymptotic_spread_si(1e-3), 4.6e-14), (asymptotic_spread_si(5.97e24), 5.9e-28),
                 (trajectory_variance_si(1e-3, 1.0).value, 1.1e-31),
                 (trajectory_variance_si(5.97e24, 1.0).value, 1.8e-59)]
        worst = max(abs(v / ref - 1.0) for v, ref in pairs)
        return worst < 0.02, f"largest relative deviation {worst:.3%}"

    def jump_variance():
        grid = SpatialGrid(-16.0, 16.0, 1024)
        psi, _ = apply_jump(gaussian_state(grid, 0.0, 1.0), 0, 0.0, 1.0)
        x = grid.x
        p = np.abs(psi.amplitudes) ** 2 * grid.dx
        var = float(np.sum(p * x * x) - np.sum(p * x) ** 2)
        expected = 1.0 / (1.0 + 2.0)
        return abs(var / expected - 1.0) < 0.02, f"variance {var:.5f}, expected {expected:.5f}"

    def stationary_spread():
        grid = SpatialGrid(-12.0, 12.0, 256)
        config = QmuplConfig(grid=grid, particles=[ParticleSpec(1.0)], lambda0_sim=1.0, dt=2e-4, horizon=6.0,
                             initial_state=gaussian_state(grid, 0.0, 1.5), output_every=30000,
                             guard_length=3.0, comoving=True)
        sigma_q = float(run_qmupl_trajectory(config, NoiseStream(5, 0)).series["sigma_q"][-1])
        a = gaussian_width_oracle(complex(1.0 / 9.0), 1.0, 1.0, 0.0, [0.0, config.horizon])
        expected = float(np.sqrt(width_moments(a)[0][-1]))
        ok = abs(sigma_q / expected - 1.0) < 0.02 and abs(expected / stationary_width(1.0, 1.0) - 1.0) < 0.02
        return ok, f"sigma_q {sigma_q:.5f}, oracle {expected:.5f}"

    def csl_alpha():
        space = LatticeFockSpace(4, 1)
        h = hopping_hamiltonian(space, 1.0)
        rho = fock_density(ground_state(space, h, 1))
        ratio = lattice_energy_slope(space, h, 0.1, 40.0, rho) / lattice_energy_slope(space, h, 0.1, 20.0, rho)
        return abs(ratio - 2.0) < 0.2, f"slope ratio {ratio:.4f}"

    def determinism():
        config = preset("born_default")
        config.integrator.horizon = 0.2
        sampler = build_sampler(config)
        a = run_ensemble(sampler, 20, 11, chunk_size=8).to_dict()
        b = run_ensemble(sampler, 20, 11, chunk_size=8).to_dict()
        return json.dumps(a) == json.dumps(b), "repeated ensemble statistics identical"

    def born():
        config = preset("born_default")
        sampler = build_sampler(config)
        stats = run_ensemble(sampler, 300, 7)
        summary = born_statistics(stats.records, outcome_weights(config))
        plus = summary["basins"][0]
        ok = abs(plus["frequency"] - 0.3) <= 3.0 * plus["standard_error"]
        return ok, f"frequency {plus['frequency']:.3f} vs 0.300 +- {3 * plus['standard_error']:.3f}"

    return [("coherence decay closed form", coherence), ("SI predictions", si_values),
            ("post-jump variance", jump_variance), ("stationary spread", stationary_spread),
            ("CSL energy slope vs alpha", csl_alpha), ("ensemble determinism", determinism),
            ("Born frequencies (300 runs)", born)]


@main.command()
def selftest():
    """Run reduced acceptance checks"""
    table = Table(title="Self-test")
    table.add_column("Check", style="cyan")
    table.add_column("Result")
    table.add_column("Detail")
    failed = 0
    for name, check in _selftest_checks():
        try:
            ok, detail = check()
        except (CollapsarError, FloatingPointError, np.linalg.LinAlgError) as e:
            ok, detail = False, f"{type(e).__name__}: {e}"
        failed += not ok
        table.add_row(name, "[green]✓ pass[/green]" if ok else "[red]✗ fail[/red]", detail)
    console.print(table)
    if failed:
        console.print(f"\n[bold red]✗ {failed} check(s) failed[/bold red]")
        sys.exit(EXIT_ACCEPTANCE)
    console.print("\n[bold green]✓ All checks passed[/bold green]")


def _display_stats(stats: EnsembleStats):
    table = Table(title="Ensemble Summary")
    table.add_column("Metric", style="cyan")
    table.add_column("Value", justify="right")
    for key, value in stats.get_statistics().items():
        table.add_row(key.replace("_", " ").title(), str(value))
    for name in stats.observables:
        table.add_row(f"final {name}", f"{stats.mean(name)[-1]:.6g} ± {stats.standard_error(name)[-1]:.2g}")
    console.print(table)


def _display_born(report: Dict[str, Any]):
    if not report:
        return
    table = Table(title="Outcome frequencies")
    table.add_column("Outcome", style="cyan")
    table.add_column("Frequency", justify="right")
    table.add_column("Expected", justify="right")
    table.add_column("SE", justify="right")
    entries = ([("plus", report["plus"]), ("minus", report["minus"])] if "plus" in report
               else [(f"basin {k}", b) for k, b in enumerate(report["basins"])])
    for label, entry in entries:
        table.add_row(label, f"{entry['frequency']:.4f}", f"{entry.get('expected', float('nan')):.4f}",
                      f"{entry['standard_error']:.4f}")
    console.print(table)
    if report.get("p_value") is not None:
        console.print(f"chi2 = {report['chi2']:.3f}, p = {report['p_value']:.3f}")


def _display_written(written: Dict[str, Path]):
    console.print("\n[bold]Output Files:[/bold]")
    for kind, path in written.items():
        console.print(f"  • {kind}: {path}")


if __name__ == '__main__':
    main()

import argparse
import json
import logging
import logging.config
import logging.handlers
from pathlib import Path
import sys
from typing import NoReturn

import numpy as np
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from harness import (
    RunMetrics,
    holding_energy_drift,
    monte_carlo,
    run,
    sweep_stable_range,
    write_metrics,
    write_trajectory,
)
from lqr import (
    NoConvergence,
    NotStabilizable,
    build_case_plants,
    case_constants,
    sampled_spectral_radius,
    solve_care,
)
from model import equilibrium_posture
from schema import Scenario, ScenarioParseError, apply_overrides, read_scenario, scenario_from_values


logger = logging.getLogger("logbalance")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FALL = 2
EXIT_DIAGNOSTIC = 3
EXIT_USAGE = 64

ENERGY_TOLERANCE = 1e-6
RESIDUAL_BOUND = 1e-8
MONTE_CARLO_PASS = 0.9

console = Console()
err_console = Console(stderr=True)


def setup_logging() -> None:
    config_file = Path(__file__).with_name("config.json")
    with open(config_file) as f_in:
        config = json.load(f_in)
    log_file = Path(config["handlers"]["file"]["filename"])
    log_file.parent.mkdir(parents=True, exist_ok=True)
    logging.config.dictConfig(config)


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="logbalance", description="Log-balancing controller simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("scenario", nargs="?", help="flat key = value scenario file (defaults if omitted)")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a scenario key, last one wins",
        )

    simulate = sub.add_parser("simulate", help="run one scenario and write CSV + JSON")
    scenario_args(simulate)

    sweep = sub.add_parser("sweep", help="find the stable initial COM offset range")
    scenario_args(sweep)
    sweep.add_argument("--from", dest="start", type=float, default=-0.05)
    sweep.add_argument("--to", dest="stop", type=float, default=0.10)
    sweep.add_argument("--step", type=float, default=0.01)
    sweep.add_argument("--workers", type=int, default=1)

    mc = sub.add_parser("montecarlo", help="repeat a noisy scenario over seeds")
    scenario_args(mc)
    mc.add_argument("--seeds", type=int, default=20)
    mc.add_argument("--workers", type=int, default=1)

    report = sub.add_parser("lqr-report", help="print case plants, gains and residuals")
    scenario_args(report)

    energy = sub.add_parser("energy-check", help="energy drift under constant holding torques")
    scenario_args(energy)
    energy.add_argument("--duration", type=float, default=1.0)
    return parser


def load_scenario(args: argparse.Namespace) -> Scenario:
    if args.scenario is None:
        return scenario_from_values(apply_overrides({}, args.overrides))
    return read_scenario(args.scenario, args.overrides)


def summary_line(metrics: RunMetrics) -> str:
    settle = "none" if metrics.settle_time is None else f"{metrics.settle_time:.2f}"
    dwell = ",".join(f"{mode}:{seconds:.2f}" for mode, seconds in sorted(metrics.case_dwell.items()))
    modes = ">".join(metrics.mode_sequence) or "-"
    return (
        f"converged={str(metrics.converged).lower()} fell={str(metrics.fell).lower()} "
        f"settle_time={settle} modes={modes} dwell={dwell or '-'} "
        f"max_excursion={metrics.max_excursion:.4f}"
    )


def simulate(args: argparse.Namespace) -> int:
    sc = load_scenario(args)
    record, metrics = run(sc)
    write_trajectory(record, f"{sc.output}.csv")
    write_metrics(metrics, f"{sc.output}.json")
    console.print(summary_line(metrics), highlight=False, soft_wrap=True)
    if metrics.converged:
        return EXIT_OK
    return EXIT_FALL if metrics.fell else EXIT_DIAGNOSTIC


def offset_grid(start: float, stop: float, step: float) -> list[float]:
    if step <= 0:
        raise ValueError("--step must be positive.")
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 10) for i in range(max(count, 0))]


def sweep(args: argparse.Namespace) -> int:
    sc = load_scenario(args)
    grid = offset_grid(args.start, args.stop, args.step)
    result = sweep_stable_range(sc, grid, args.workers)
    table = Table(title="Initial COM offset sweep")
    for name in ("offset [m]", "converged", "fell", "settle [s]", "modes"):
        table.add_column(name)
    for offset, m in result.metrics.items():
        settle = "-" if m.settle_time is None else f"{m.settle_time:.2f}"
        table.add_row(f"{offset:+.3f}", str(m.converged), str(m.fell), settle, ">".join(m.mode_sequence))
    console.print(table)
    if result.min_stable is None:
        console.print("stable_range=none")
        return EXIT_DIAGNOSTIC
    console.print(f"stable_range=[{result.min_stable:+.3f}, {result.max_stable:+.3f}]")
    return EXIT_OK


def montecarlo(args: argparse.Namespace) -> int:
    sc = load_scenario(args)
    result = monte_carlo(sc, list(range(args.seeds)), args.workers)
    converged = sum(m.converged for m in result.metrics)
    console.print(f"converged={converged}/{len(result.metrics)} fraction={result.converged_fraction:.2f}")
    return EXIT_OK if result.converged_fraction >= MONTE_CARLO_PASS else EXIT_DIAGNOSTIC


def _matrix(a: np.ndarray) -> str:
    return np.array2string(np.asarray(a), precision=5, suppress_small=True)


def lqr_report(args: argparse.Namespace) -> int:
    sc = load_scenario(args)
    p = sc.body
    eq = equilibrium_posture(p)
    consts = case_constants(p, eq)
    console.print(
        f"C1={consts.c1:.6g} C3={consts.c3:.6g} C4={consts.c4:.6g} L={consts.pendulum_length:.6g}"
    )
    identity = abs(consts.c1 - consts.c3 * consts.c4) / consts.c1
    console.print(f"C1 = C3*C4 relative error {identity:.2e}")

    table = Table(title="Case plants")
    for name in ("plant", "A", "B", "Q", "K", "residual", "closed-loop eigenvalues", "sampled radius", "ok"):
        table.add_column(name)
    healthy = True
    for plant in build_case_plants(p, sc.penalties, eq):
        try:
            gain = solve_care(plant)
        except (NotStabilizable, NoConvergence) as err:
            healthy = False
            table.add_row(plant.label, _matrix(plant.A), _matrix(plant.B), _matrix(plant.Q), "-", "-", str(err), "-", "no")
            continue
        scale = max(1.0, float(np.linalg.norm(gain.P, "fro")))
        radius = sampled_spectral_radius(plant, gain, sc.policy.dt_control)
        ok = (
            gain.residual < RESIDUAL_BOUND * scale
            and bool(np.all(gain.closed_loop_eigenvalues.real < 0))
            and radius < 1.0
        )
        healthy = healthy and ok
        table.add_row(
            plant.label,
            _matrix(plant.A),
            _matrix(plant.B),
            _matrix(plant.Q),
            _matrix(gain.K),
            f"{gain.residual:.2e}",
            _matrix(gain.closed_loop_eigenvalues),
            f"{radius:.4f}",
            "yes" if ok else "no",
        )
    console.print(table)
    return EXIT_OK if healthy else EXIT_DIAGNOSTIC


def energy_check(args: argparse.Namespace) -> int:
    sc = load_scenario(args)
    if args.duration < 0:
        raise ValueError("--duration must be non-negative.")
    drift = holding_energy_drift(sc.body, args.duration, sc.policy.dt_physics_fine)
    console.print(
        f"energy_initial={drift.initial:.9g} energy_final={drift.final:.9g} "
        f"relative_drift={drift.relative_drift:.3e} steps={drift.steps}",
        highlight=False,
        soft_wrap=True,
    )
    return EXIT_OK if drift.relative_drift < ENERGY_TOLERANCE else EXIT_DIAGNOSTIC


COMMANDS = {
    "simulate": simulate,
    "sweep": sweep,
    "montecarlo": montecarlo,
    "lqr-report": lqr_report,
    "energy-check": energy_check,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (OSError, ScenarioParseError, ValidationError, ValueError, ArithmeticError) as err:
        logger.error(f"{args.command} failed: {err}")
        err_console.print(f"error: {err}", highlight=False, markup=False)
        return EXIT_ERROR


if __name__ == "__main__":
    setup_logging()
    sys.exit(main())

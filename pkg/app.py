"""Command-line entry point for the LOV Monte Carlo engine."""
import argparse
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

from pydantic import ValidationError

import config
from engine.pipeline import run_calibration, run_localvol, run_pricing, run_report, run_simulation
from engine.reporting import build_manifest, write_manifest
from engine.schemas import CalibrationConfig, LovError, SimulateConfig
from services.localvol import load_surface_csv
from services.market_data import load_environment
from utils.io_utils import read_json
from utils.logging_utils import get_logger, set_level

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_DOMAIN_ERROR = 1
EXIT_USAGE_ERROR = 2


class UsageError(Exception):
    """A command line argparse rejected."""


class CliParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting, so a failed run can still be recorded."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _slice(value: str) -> Tuple[float, float]:
    try:
        t, spot = (float(part) for part in value.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected T,X (e.g. 0.0833,100), got {value!r}")
    return t, spot


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(
        prog="lov",
        description="Local occupied volatility: simulation, LSMC pricing and neural calibration.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for DEBUG logging")
    parser.add_argument("--workers", type=int, default=config.WORKERS, help="threads for the kernel projection")
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", help="simulate LOV paths")
    simulate.add_argument("--config", required=True, help="JSON: simulation, environment, model")
    simulate.add_argument("--surface", required=True, help="local vol surface CSV")
    simulate.add_argument("--out", required=True, help="output directory")

    price = sub.add_parser("price", help="price a chain on one simulated ensemble")
    price.add_argument("--config", required=True, help="JSON: simulation, environment, model")
    price.add_argument("--surface", required=True, help="local vol surface CSV")
    price.add_argument("--instruments", required=True, help="option chain CSV")
    price.add_argument("--out", required=True, help="output CSV strike,expiry,flag,exercise,price,std_error")

    localvol = sub.add_parser("localvol", help="Dupire local vols from an implied surface")
    localvol.add_argument("--implied", required=True, help="implied vol surface CSV")
    localvol.add_argument("--env", required=True, help="market environment JSON")
    localvol.add_argument("--out", required=True, help="output local vol surface CSV")

    for name, helptext in (("calibrate", "calibrate the sensitivity to American puts"),
                           ("report", "price all instruments under the calibrated sensitivity")):
        cmd = sub.add_parser(name, help=helptext)
        cmd.add_argument("--chain", required=True, help="option chain CSV")
        cmd.add_argument("--env", required=True, help="market environment JSON")
        cmd.add_argument("--surface", required=True, help="local vol surface CSV")
        cmd.add_argument("--config", help="calibration JSON (defaults when omitted)")
        cmd.add_argument("--out-dir", required=True, help="output directory")

    report = sub.choices["report"]
    report.add_argument("--theta", help="calibrated theta: network checkpoint .csv or parametric .json")
    report.add_argument("--slice", type=_slice, action="append", default=[], metavar="T,X",
                        help="sensitivity slice x -> l(T, X, x); repeatable")
    report.add_argument("--history", help="loss_history.csv of the calibration run")
    report.add_argument("--snapshot-path", type=int, default=0, help="path id of the occupation snapshot")
    return parser


def _load_json_config(model_cls, path: Optional[str]):
    if path is None:
        return model_cls()
    return model_cls.model_validate(read_json(path))


def _cmd_simulate(args: argparse.Namespace, run: Dict[str, Any]) -> None:
    run_config = SimulateConfig.model_validate(read_json(args.config))
    run.update(config=run_config.model_dump(mode="json"), seed=run_config.simulation.seed)
    surface = load_surface_csv(args.surface, "local")
    run_simulation(run_config, surface, args.out, workers=args.workers)


def _cmd_price(args: argparse.Namespace, run: Dict[str, Any]) -> None:
    run_config = SimulateConfig.model_validate(read_json(args.config))
    run.update(config=run_config.model_dump(mode="json"), seed=run_config.simulation.seed)
    surface = load_surface_csv(args.surface, "local")
    run_pricing(run_config, surface, args.instruments, args.out, workers=args.workers)


def _cmd_localvol(args: argparse.Namespace, run: Dict[str, Any]) -> None:
    env = load_environment(args.env)
    run.update(config={"environment": env.model_dump(mode="json")})
    implied = load_surface_csv(args.implied, "implied")
    run_localvol(implied, env, args.out)


def _cmd_calibrate(args: argparse.Namespace, run: Dict[str, Any]) -> None:
    settings = _load_json_config(CalibrationConfig, args.config)
    env = load_environment(args.env)
    run.update(config=settings.model_dump(mode="json"), seed=settings.seed)
    surface = load_surface_csv(args.surface, "local")
    run_calibration(settings, env, surface, args.chain, args.out_dir, workers=args.workers)


def _cmd_report(args: argparse.Namespace, run: Dict[str, Any]) -> None:
    settings = _load_json_config(CalibrationConfig, args.config)
    env = load_environment(args.env)
    theta_values = None
    if args.theta:
        theta = Path(args.theta)
        if theta.suffix == ".json":
            theta_values = read_json(theta)["parameters"]
        elif theta.is_file():
            spec = settings.model.spec.model_copy(update={"variant": "neural", "checkpoint": str(theta)})
            settings = settings.model_copy(update={"model": settings.model.model_copy(update={"spec": spec})})
        else:
            raise FileNotFoundError(f"Checkpoint not found: {theta}")
    run.update(config=settings.model_dump(mode="json"), seed=settings.holdout_seed)
    surface = load_surface_csv(args.surface, "local")
    run_report(
        settings,
        env,
        surface,
        args.chain,
        args.out_dir,
        slices=args.slice,
        history_path=args.history,
        snapshot_path=args.snapshot_path,
        theta_values=theta_values,
        workers=args.workers,
    )


COMMANDS: Dict[str, Callable[[argparse.Namespace, Dict[str, Any]], None]] = {
    "simulate": _cmd_simulate,
    "price": _cmd_price,
    "localvol": _cmd_localvol,
    "calibrate": _cmd_calibrate,
    "report": _cmd_report,
}


def _manifest_dir(args: argparse.Namespace) -> Path:
    if args.command == "simulate":
        return Path(args.out)
    if args.command in ("price", "localvol"):
        return Path(args.out).parent
    return Path(args.out_dir)


def _inputs(args: argparse.Namespace) -> Dict[str, Optional[str]]:
    names = ("config", "surface", "instruments", "implied", "env", "chain", "theta", "history")
    return {name: getattr(args, name, None) for name in names}


def _recover_args(argv: Sequence[str]) -> Optional[argparse.Namespace]:
    """Command and output location of a command line that failed to parse, when both are present."""
    command = next((a for a in argv if a in COMMANDS), None)
    if command is None:
        return None
    loose = CliParser(add_help=False)
    loose.add_argument("--out")
    loose.add_argument("--out-dir")
    try:
        known, _ = loose.parse_known_args(argv)
    except UsageError:
        return None
    if (known.out_dir if command in ("calibrate", "report") else known.out) is None:
        return None
    return argparse.Namespace(command=command, out=known.out, out_dir=known.out_dir)


def _write_run_manifest(
    args: argparse.Namespace,
    started_at: datetime,
    started: float,
    exit_code: int,
    error: Optional[str],
    run: Dict[str, Any],
) -> None:
    manifest = build_manifest(
        args.command,
        started_at,
        time.perf_counter() - started,
        exit_code,
        error=error,
        resolved_config=run["config"],
        seed=run["seed"],
        inputs=_inputs(args),
    )
    try:
        write_manifest(_manifest_dir(args), manifest)
    except OSError as e:
        logger.warning(f"Could not write run manifest: {str(e)}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand.

    Usage errors found while parsing still leave a failed manifest when the
    command and its output flag can be read from the command line.

    Returns:
        0 on success, 1 on a domain error, 2 on a usage error (bad flag,
        missing file, schema violation)
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    started_at = datetime.now(timezone.utc)
    started = time.perf_counter()
    run: Dict[str, Any] = {"config": {}, "seed": None}
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        recovered = _recover_args(argv)
        if recovered is not None:
            _write_run_manifest(recovered, started_at, started, EXIT_USAGE_ERROR, f"UsageError: {str(e)}", run)
        return EXIT_USAGE_ERROR
    except SystemExit as e:
        return int(e.code or 0)

    if args.verbose:
        set_level(logging.DEBUG)
    if args.workers < 1:
        message = f"--workers must be >= 1, got {args.workers}"
        parser.print_usage(sys.stderr)
        print(f"lov: error: {message}", file=sys.stderr)
        _write_run_manifest(args, started_at, started, EXIT_USAGE_ERROR, f"UsageError: {message}", run)
        return EXIT_USAGE_ERROR

    error: Optional[str] = None
    try:
        COMMANDS[args.command](args, run)
        exit_code = EXIT_OK
    except LovError as e:
        error = f"{type(e).__name__}: {str(e)}"
        exit_code = EXIT_DOMAIN_ERROR
    except (FileNotFoundError, ValidationError, ValueError, KeyError) as e:
        error = f"{type(e).__name__}: {str(e)}"
        exit_code = EXIT_USAGE_ERROR

    if error:
        logger.error(error)
        print(f"lov {args.command}: {error}", file=sys.stderr)
    _write_run_manifest(args, started_at, started, exit_code, error, run)
    return exit_code


if __name__ == "__main__":
    sys.exit(main())

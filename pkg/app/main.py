"""
Pitch Kinematics - command-line entry point.

    python -m app.main <command> [options]

Exit status: 0 success, 1 usage error, 2 data or model error, 3 numerical
failure.
"""
import argparse
import sys
import time
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from app import __version__
from app.commands import input_paths, kalman, plot, vae
from app.config import ensure_directories, settings
from app.services.errors import DataError, ModelError, NumericalError
from app.services.storage import RunManifest, storage
from app.utils.file_utils import input_digests
from app.utils.logger import app_logger, error_logger, log_command

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class CliParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> CliParser:
    parser = CliParser(
        prog="pitchkin",
        description=f"{settings.APP_NAME}: Kalman filtering, likelihood estimation and VAE trajectories",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    kalman.register(subparsers)
    vae.register(subparsers)
    plot.register(subparsers)
    return parser


def _command_name(args) -> str:
    action = getattr(args, "action", None)
    return f"{args.command} {action}" if action else args.command


def _flags(args) -> dict:
    flags = {}
    for name, value in vars(args).items():
        if name in ("handler", "command", "action"):
            continue
        flags[name] = str(value) if isinstance(value, Path) else value
    return flags


def _write_manifest(args, command: str, outcome, status, error: Optional[str], started: float) -> bool:
    """
    Record the run next to its primary output, failed runs included.

    Failed runs digest only the inputs that exist. Returns False when the
    manifest could not be written.
    """
    if outcome is not None:
        output, seed, inputs, outputs = outcome.output, outcome.seed, outcome.inputs, outcome.outputs
    else:
        output, seed, outputs = getattr(args, "output", None), getattr(args, "seed", None), []
        inputs = [p for p in input_paths(args) if Path(p).is_file()]
    if output is None:
        return True

    try:
        manifest = RunManifest(
            command=command,
            flags=_flags(args),
            seed=seed,
            input_digests=input_digests(inputs),
            outputs=[str(p) for p in outputs],
            wall_clock_s=time.perf_counter() - started,
            exit_code=status,
            error=error,
        )
        storage.write_manifest(output, manifest)
    except (DataError, OSError) as e:
        error_logger.error(f"{command}: could not write manifest: {e}")
        print(f"error: could not write manifest: {e}", file=sys.stderr)
        return False
    return True


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse `argv`, run the subcommand and write its manifest.

    Returns:
        Process exit status
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    command = _command_name(args)
    started = time.perf_counter()
    ensure_directories()
    app_logger.info(f"Starting {command}")

    outcome, status, error = None, None, "run did not finish"
    try:
        outcome = args.handler(args)
        status, error = EXIT_OK, None
    except (DataError, ModelError) as e:
        error_logger.error(f"{command}: {e}")
        print(f"error: {e}", file=sys.stderr)
        status, error = EXIT_DATA, str(e)
    except ValidationError as e:
        error_logger.error(f"{command}: invalid configuration: {e}")
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        status, error = EXIT_DATA, f"invalid configuration: {e}"
    except NumericalError as e:
        error_logger.error(f"{command}: {e}")
        print(f"numerical failure: {e}", file=sys.stderr)
        status, error = EXIT_NUMERICAL, str(e)
    finally:
        if not _write_manifest(args, command, outcome, status, error, started) and status == EXIT_OK:
            status = EXIT_DATA
        log_command(command, status, (time.perf_counter() - started) * 1000)

    return status


if __name__ == "__main__":
    sys.exit(main())

import argparse
import logging
import sys
from typing import NoReturn, Sequence

from pydantic import ValidationError

from kpconvx.errors import KPXError
from kpconvx.models.config import settings
from kpconvx.models.schemas import ErrorResponse
from kpconvx.routers import bench_router, data_router, kernel_router, train_router

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    """Raised by the parser instead of exiting."""


class CommandParser(argparse.ArgumentParser):
    """ArgumentParser reporting usage errors through :class:`UsageError`."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _report(error: str, message: str, detail: str | None = None) -> None:
    response = ErrorResponse(error=error, message=message, detail=detail)
    line = f"{response.error}: {response.message}"
    if response.detail:
        line += f"\n  {response.detail}"
    print(line, file=sys.stderr)


def _common_options(suppress: bool) -> argparse.ArgumentParser:
    # sub-commands repeat the global flags without overwriting values given before the command
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--seed",
        type=int,
        default=argparse.SUPPRESS if suppress else None,
        help="Seed of every random stream (default: 0, or the seeds of a --config file)",
    )
    common.add_argument(
        "--log-level", default=argparse.SUPPRESS if suppress else None, help="Logging level (default: KPX_LOG_LEVEL)"
    )
    return common


def build_parser() -> CommandParser:
    parser = CommandParser(
        prog=settings.cli_name, description=settings.cli_description, parents=[_common_options(False)]
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.cli_version}")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    common = _common_options(True)
    kernel_router.register(subparsers, common)
    data_router.register(subparsers, common)
    train_router.register(subparsers, common)
    bench_router.register(subparsers, common)
    return parser


def _configure_logging(level: str | None) -> None:
    logging.basicConfig(
        level=(level or settings.log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def run(argv: Sequence[str] | None = None) -> int:
    """
    Parse ``argv`` and dispatch to the command handler.

    Returns:
        0 on success, 1 on a usage error, 2 on a runtime error
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _report("UsageError", str(exc))
        return EXIT_USAGE
    except SystemExit as exc:
        # --help and --version
        return int(exc.code or 0)

    try:
        _configure_logging(args.log_level)
    except ValueError as exc:
        _report("UsageError", f"invalid log level '{args.log_level}'", str(exc))
        return EXIT_USAGE

    try:
        return args.handler(args)
    except ValidationError as exc:
        _report("ConfigurationError", "Invalid configuration", str(exc))
    except KPXError as exc:
        _report(type(exc).__name__, str(exc))
    except OSError as exc:
        _report("FileError", exc.strerror or "I/O error", str(exc))
    except Exception as exc:
        logger.debug("Unexpected failure", exc_info=True)
        _report("InternalError", "An unexpected error occurred", str(exc) if settings.debug else None)
    return EXIT_RUNTIME


def main() -> NoReturn:
    sys.exit(run())


if __name__ == "__main__":
    main()

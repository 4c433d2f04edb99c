import argparse
import json
import logging

from kpconvx.errors import ContractError
from kpconvx.models.schemas import KernelOptimizerConfig
from kpconvx.services.kernelgeo import nearest_kernel_regions, optimize_disposition, region_volumes, verify_disposition
from kpconvx.storage.csvlog import write_table
from kpconvx.storage.disposition import load_disposition, save_disposition

logger = logging.getLogger(__name__)


def parse_int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from exc


def register(subparsers, common: argparse.ArgumentParser) -> None:
    """Add the ``kernel init|check|regions`` commands."""
    kernel = subparsers.add_parser("kernel", help="Kernel point dispositions")
    commands = kernel.add_subparsers(dest="kernel_command", required=True, metavar="{init,check,regions}")

    init = commands.add_parser("init", parents=[common], help="Optimize a multi-shell disposition")
    init.add_argument("--shells", type=parse_int_list, default=[1, 14, 28], help="Shell counts, e.g. 1,14,28")
    init.add_argument("--radius", type=float, default=2.1, help="Kernel radius (cell units)")
    init.add_argument("--max-iterations", type=int, default=None)
    init.add_argument("--out", required=True, help="Disposition file to write")
    init.set_defaults(handler=init_kernel)

    check = commands.add_parser("check", parents=[common], help="Verify the invariants of a disposition file")
    check.add_argument("path")
    check.add_argument("--tolerance", type=float, default=1e-6, help="Absolute tolerance on shell and radii errors")
    check.set_defaults(handler=check_kernel)

    regions = commands.add_parser("regions", parents=[common], help="Export nearest-kernel regions as CSV")
    regions.add_argument("path")
    regions.add_argument("--resolution", type=int, default=32, help="Probe samples per axis")
    regions.add_argument("--out", required=True)
    regions.set_defaults(handler=kernel_regions)


def init_kernel(args: argparse.Namespace) -> int:
    """
    Optimize a disposition and write it to ``--out``.

    Returns:
        Exit status
    """
    config = KernelOptimizerConfig()
    if args.max_iterations is not None:
        config = config.model_copy(update={"max_iterations": args.max_iterations})
    disposition = optimize_disposition(args.shells, args.radius, seed=args.seed or 0, config=config)
    save_disposition(disposition, args.out)
    report = verify_disposition(disposition)
    print(json.dumps({"path": args.out, "K": disposition.K, **report.model_dump()}, indent=2))
    return 0


def check_kernel(args: argparse.Namespace) -> int:
    """Print the invariant report of a disposition file; fail when an invariant is broken."""
    disposition = load_disposition(args.path)
    report = verify_disposition(disposition)
    passed = report.passes(args.tolerance)
    print(json.dumps({"path": args.path, "K": disposition.K, "passed": passed, **report.model_dump()}, indent=2))
    if not passed:
        raise ContractError(f"{args.path} breaks the disposition invariants")
    return 0


def kernel_regions(args: argparse.Namespace) -> int:
    disposition = load_disposition(args.path)
    regions = nearest_kernel_regions(disposition, args.resolution)
    write_table(regions, args.out)
    volumes = region_volumes(disposition, seed=args.seed or 0)
    logger.info("Region volume fractions: min %.4f, max %.4f", volumes.min(), volumes.max())
    print(f"Wrote {len(regions)} probes over {disposition.K} regions to {args.out}")
    return 0

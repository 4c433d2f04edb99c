import argparse
import logging

from kpconvx.models.schemas import BenchSpec
from kpconvx.services.bench import OPERATORS, sweep
from kpconvx.storage.csvlog import write_table

logger = logging.getLogger(__name__)

_COLUMNS = ["op", "param", "value", "median_s", "mean_s", "std_s", "influence_s", "ops", "expected_ops", "memory_bytes"]


def parse_sweep(text: str) -> tuple[str, list[int]]:
    """``K=15,27,43`` -> ("K", [15, 27, 43])."""
    name, _, values = text.partition("=")
    name = name.strip().upper()
    if name not in ("K", "N", "H", "C", "G") or not values:
        raise argparse.ArgumentTypeError(f"expected PARAM=v1,v2,... with PARAM in K, N, H, C, G, got '{text}'")
    try:
        return name, [int(v) for v in values.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"sweep values must be integers, got '{values}'") from exc


def register(subparsers, common: argparse.ArgumentParser) -> None:
    """Add the ``bench`` command."""
    bench = subparsers.add_parser("bench", parents=[common], help="Operation counts and timings of an operator")
    bench.add_argument("--op", choices=OPERATORS, default="kpconvd")
    bench.add_argument("--sweep", type=parse_sweep, default=("K", [15, 27, 43]), help="e.g. K=15,27,43")
    bench.add_argument("--n", type=int, default=4096)
    bench.add_argument("--h", type=int, default=16)
    bench.add_argument("--c", type=int, default=128)
    bench.add_argument("--k", type=int, default=43)
    bench.add_argument("--g", type=int, default=8)
    bench.add_argument("--c-out", type=int, default=64)
    bench.add_argument("--trials", type=int, default=7)
    bench.add_argument("--warmup", type=int, default=1)
    bench.add_argument("--parallel", action="store_true", help="Split query rows over KPX_THREADS workers")
    bench.add_argument("--out", default=None, help="CSV report")
    bench.set_defaults(handler=run_bench)


def run_bench(args: argparse.Namespace) -> int:
    param, values = args.sweep
    spec = BenchSpec(
        op=args.op,
        sweep_param=param,
        sweep_values=values,
        n=args.n,
        h=args.h,
        c=args.c,
        k=args.k,
        g=args.g,
        c_out=args.c_out,
        trials=args.trials,
        warmup=args.warmup,
        parallel=args.parallel,
        seed=args.seed or 0,
    )
    report = sweep(spec)
    if args.out:
        write_table(report, args.out)
    print(report[_COLUMNS].to_string(index=False))
    return 0

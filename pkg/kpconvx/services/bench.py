"""Operation counts and wall-clock sweeps of the kernel point operators."""

import logging
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pandas as pd

from kpconvx.errors import ContractError
from kpconvx.models.config import settings
from kpconvx.models.schemas import BenchRow, BenchSpec, shells_for_k
from kpconvx.services.kernelgeo import KernelDisposition, optimize_disposition
from kpconvx.services.kpops import (
    DenseKernel,
    DepthwiseKernel,
    InfluenceTable,
    ModulationHead,
    influence,
    kpconv_dense,
    kpconvd,
    kpconvd_fullsum,
    kpconvx,
    kpinv,
)
from kpconvx.services.sampling import NeighborTable, knn_truncated
from kpconvx.tensorcore import Tensor, no_grad
from kpconvx.tensorcore.counters import OpCounter, counting

logger = logging.getLogger(__name__)

OPERATORS = ("kpconv", "kpconvd", "kpconvd_fullsum", "kpconvx", "kpinv")
BENCH_RADIUS = 2.1


@lru_cache(maxsize=32)
def _disposition_for_k(k: int) -> KernelDisposition:
    return optimize_disposition(shells_for_k(k), BENCH_RADIUS, seed=0)


@dataclass
class BenchInstance:
    """Random operator inputs: a uniform cloud, its neighbor table and the operator weights."""

    kind: str
    n: int
    h: int
    k: int
    c: int
    g: int
    c_out: int
    points: np.ndarray
    table: NeighborTable
    disposition: KernelDisposition
    features: Tensor
    depthwise: DepthwiseKernel | None = None
    dense: DenseKernel | None = None
    head: ModulationHead | None = None

    @property
    def mode(self) -> str:
        return "full" if self.kind in ("kpconv", "kpconvd_fullsum") else "nearest"

    @property
    def params(self) -> dict[str, int]:
        return {"N": self.n, "H": self.h, "K": self.k, "C": self.c, "G": self.g}


def make_instance(
    kind: str, n: int, h: int, k: int, c: int, g: int = 8, c_out: int = 64, seed: int = 0
) -> BenchInstance:
    """
    Deterministic instance of ``kind``.

    Points are uniform in a cube sized so that a radius-``BENCH_RADIUS`` ball holds about
    ``2h`` points on average; lengths are in cell units (cell size 1).
    """
    if kind not in OPERATORS:
        raise ContractError(f"Unknown operator '{kind}', expected one of {', '.join(OPERATORS)}")
    rng = np.random.default_rng(seed)
    ball = 4.0 / 3.0 * math.pi * BENCH_RADIUS**3
    side = (n * ball / (2 * h)) ** (1 / 3)
    points = rng.uniform(0, side, (n, 3))
    table = knn_truncated(points, points, [n], [n], h, BENCH_RADIUS)
    features = Tensor(rng.standard_normal((n, c)))
    instance = BenchInstance(
        kind=kind, n=n, h=h, k=k, c=c, g=g, c_out=c_out, points=points, table=table,
        disposition=_disposition_for_k(k), features=features,
    )
    if kind == "kpconv":
        instance.dense = DenseKernel.create(k, c, c_out, rng)
    if kind in ("kpconvd", "kpconvd_fullsum", "kpconvx"):
        instance.depthwise = DepthwiseKernel.create(k, c, rng)
    if kind in ("kpconvx", "kpinv"):
        instance.head = ModulationHead.create(c, k, g, rng)
    return instance


def instance_influence(instance: BenchInstance) -> InfluenceTable:
    return influence(instance.points, instance.points, instance.table, instance.disposition, instance.mode)


def run_operator(instance: BenchInstance, infl: InfluenceTable, rows: slice | None = None) -> Tensor:
    """Evaluate the operator, optionally on a slice of the query rows only."""
    table = instance.table if rows is None else instance.table.rows(rows)
    infl = infl if rows is None else infl.rows(rows)
    features = instance.features
    center = features if rows is None else Tensor(features.values[rows])
    if instance.kind == "kpconv":
        return kpconv_dense(features, table, infl, instance.dense)
    if instance.kind == "kpconvd_fullsum":
        return kpconvd_fullsum(features, table, infl, instance.depthwise)
    if instance.kind == "kpconvd":
        return kpconvd(features, table, infl, instance.depthwise)
    if instance.kind == "kpconvx":
        return kpconvx(features, center, table, infl, instance.depthwise, instance.head)
    return kpinv(features, center, table, infl, instance.head)


def _run_block(instance: BenchInstance, infl: InfluenceTable, rows: slice) -> np.ndarray:
    # grad mode is thread-local
    with no_grad():
        return run_operator(instance, infl, rows).values


def run_parallel(instance: BenchInstance, infl: InfluenceTable, workers: int) -> np.ndarray:
    """Row-parallel evaluation; each worker owns a contiguous block of queries."""
    bounds = np.linspace(0, instance.n, workers + 1).astype(int)
    blocks = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        outputs = list(pool.map(lambda rows: _run_block(instance, infl, rows), blocks))
    return np.concatenate(outputs)


def count_ops(kind: str, instance: BenchInstance) -> OpCounter:
    """Instrumented multiply-add counts of one forward evaluation (influences precomputed)."""
    if kind != instance.kind:
        raise ContractError(f"Instance was built for {instance.kind}, not {kind}")
    infl = instance_influence(instance)
    counter = OpCounter(kind=kind, params=instance.params)
    with no_grad(), counting(counter):
        run_operator(instance, infl)
    return counter


def expected_ops(kind: str, n: int, h: int, k: int, c: int, g: int = 8, c_out: int = 64) -> int:
    """
    Closed-form multiply-add count of one forward evaluation.

    Nearest-kernel operators do ``N*H*C`` influence and ``N*H*C`` weight multiplies whatever
    ``K``; the full-sum operators scale with ``K``. Modulated operators add the gate multiplies
    and the two matmuls and bias adds of the modulation head.
    """
    if kind == "kpconv":
        return n * h * k * c + n * k * c * c_out
    if kind == "kpconvd_fullsum":
        return n * h * k * c + n * k * c
    if kind == "kpconvd":
        return 2 * n * h * c
    c_g = c // g
    head = n * c * c + n * c * k * c_g + n * c + n * k * c_g
    if kind == "kpconvx":
        return 3 * n * h * c + head
    if kind == "kpinv":
        return 2 * n * h * c + head
    raise ContractError(f"Unknown operator '{kind}'")


def _timed(fn, trials: int, warmup: int) -> list[float]:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(trials):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return times


def sweep(spec: BenchSpec) -> pd.DataFrame:
    """
    Time and count ``spec.op`` for every value of the swept parameter.

    Influence tables are built outside the timed region and their own median time is reported
    in ``influence_s``. The parallel path splits the query rows over ``settings.threads``
    workers.
    """
    base = {"n": spec.n, "h": spec.h, "k": spec.k, "c": spec.c, "g": spec.g}
    rows = []
    for value in spec.sweep_values:
        params = {**base, spec.sweep_param.lower(): int(value)}
        instance = make_instance(spec.op, c_out=spec.c_out, seed=spec.seed, **params)
        infl = instance_influence(instance)
        influence_times = _timed(lambda: instance_influence(instance), spec.trials, 0)
        with no_grad():
            if spec.parallel:
                times = _timed(lambda: run_parallel(instance, infl, settings.threads), spec.trials, spec.warmup)
            else:
                times = _timed(lambda: run_operator(instance, infl), spec.trials, spec.warmup)
        counter = count_ops(spec.op, instance)
        row = BenchRow(
            op=spec.op,
            param=spec.sweep_param,
            value=int(value),
            n=params["n"],
            h=params["h"],
            k=params["k"],
            c=params["c"],
            g=params["g"],
            trials=spec.trials,
            mean_s=statistics.fmean(times),
            std_s=statistics.stdev(times),
            median_s=statistics.median(times),
            influence_s=statistics.median(influence_times),
            ops=counter.total,
            expected_ops=expected_ops(spec.op, c_out=spec.c_out, **params),
            memory_bytes=counter.allocated_bytes,
            parallel=spec.parallel,
        )
        logger.info("%s %s=%d: median %.4fs, %d ops", spec.op, spec.sweep_param, value, row.median_s, row.ops)
        rows.append(row.model_dump())
    return pd.DataFrame(rows)

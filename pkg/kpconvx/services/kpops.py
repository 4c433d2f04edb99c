"""Kernel point operators: influences, KPConv, KPConvD, KPConvX and KPInv."""

import logging
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from kpconvx.errors import ConfigurationError, ContractError, DimensionError
from kpconvx.services.kernelgeo import KernelDisposition
from kpconvx.services.sampling import NeighborTable, PoolMap
from kpconvx.tensorcore import Function, Parameter, Tensor, add, leaky_relu, matmul, reshape, sigmoid
from kpconvx.tensorcore.counters import record, record_alloc
from kpconvx.tensorcore.tensor import get_default_dtype

logger = logging.getLogger(__name__)

InfluenceMode = Literal["nearest", "full"]
InfluenceFunction = Literal["linear", "constant", "gaussian"]

# rows of the (Nq, H, K, 3) difference array processed at once
_CHUNK_ENTRIES = 1 << 22


@dataclass(frozen=True)
class InfluenceTable:
    """
    Influence of every (query, neighbor) pair.

    In ``nearest`` mode ``h`` is ``(Nq, H)`` and ``k_star`` holds the nearest kernel point, with
    ``K`` marking shadow slots. In ``full`` mode ``h`` is ``(Nq, H, K)`` and ``k_star`` is None.
    """

    h: np.ndarray
    k_star: np.ndarray | None
    mode: InfluenceMode
    num_kernel_points: int

    @property
    def num_queries(self) -> int:
        return int(self.h.shape[0])

    def rows(self, rows: np.ndarray | slice) -> "InfluenceTable":
        return InfluenceTable(
            h=self.h[rows],
            k_star=None if self.k_star is None else self.k_star[rows],
            mode=self.mode,
            num_kernel_points=self.num_kernel_points,
        )


@dataclass
class DepthwiseKernel:
    """One weight vector per kernel point, ``w`` of shape (K, C)."""

    w: Parameter

    @classmethod
    def create(cls, K: int, channels: int, rng: np.random.Generator, name: str = "kernel") -> "DepthwiseKernel":
        bound = 1.0 / math.sqrt(channels)
        return cls(w=Parameter(rng.uniform(-bound, bound, (K, channels)), name=f"{name}.w"))

    @property
    def K(self) -> int:
        return int(self.w.shape[0])

    @property
    def channels(self) -> int:
        return int(self.w.shape[1])


@dataclass
class DenseKernel:
    """One full ``C_in x C_out`` matrix per kernel point."""

    W: Parameter

    @classmethod
    def create(cls, K: int, c_in: int, c_out: int, rng: np.random.Generator, name: str = "stem") -> "DenseKernel":
        bound = 1.0 / math.sqrt(K * c_in)
        return cls(W=Parameter(rng.uniform(-bound, bound, (K, c_in, c_out)), name=f"{name}.W"))

    @property
    def K(self) -> int:
        return int(self.W.shape[0])


@dataclass
class ModulationHead:
    """Two-layer MLP producing one sigmoid gate per kernel point and channel group."""

    w1: Parameter
    b1: Parameter | None
    w2: Parameter
    b2: Parameter | None
    K: int
    groups: int
    slope: float = 0.1

    @classmethod
    def create(
        cls,
        channels: int,
        K: int,
        groups: int,
        rng: np.random.Generator,
        bias: bool = True,
        slope: float = 0.1,
        name: str = "modulation",
    ) -> "ModulationHead":
        if groups < 1 or channels % groups:
            raise ConfigurationError(f"{channels} channels cannot be split into {groups} modulation groups")
        c_g = channels // groups
        bound = 1.0 / math.sqrt(channels)
        return cls(
            w1=Parameter(rng.uniform(-bound, bound, (channels, channels)), name=f"{name}.w1"),
            b1=Parameter(rng.uniform(-bound, bound, channels), name=f"{name}.b1") if bias else None,
            w2=Parameter(rng.uniform(-bound, bound, (channels, K * c_g)), name=f"{name}.w2"),
            b2=Parameter(rng.uniform(-bound, bound, K * c_g), name=f"{name}.b2") if bias else None,
            K=K,
            groups=groups,
            slope=slope,
        )

    @property
    def channels(self) -> int:
        return int(self.w1.shape[0])

    @property
    def group_width(self) -> int:
        """C_g, the number of modulation values per kernel point."""
        return self.channels // self.groups

    def parameters(self) -> list[Parameter]:
        return [p for p in (self.w1, self.b1, self.w2, self.b2) if p is not None]


def _influence_values(distances: np.ndarray, sigma: float, function: InfluenceFunction) -> np.ndarray:
    if function == "linear":
        return np.maximum(0.0, 1.0 - distances / sigma)
    if function == "constant":
        return np.ones_like(distances)
    if function == "gaussian":
        gaussian_sigma = 0.3 * sigma
        return np.exp(-(distances**2) / (2 * gaussian_sigma**2))
    raise ContractError(f"Unknown influence function '{function}', expected linear, constant or gaussian")


def influence(
    queries: np.ndarray,
    supports: np.ndarray,
    table: NeighborTable,
    disp: KernelDisposition,
    mode: InfluenceMode = "nearest",
    cell: float = 1.0,
    function: InfluenceFunction = "linear",
) -> InfluenceTable:
    """
    Influences of the kernel points on every neighbor of every query.

    Neighbor offsets are divided by ``cell`` so they share the units of the disposition. A
    neighbor placed exactly on a kernel point receives influence 1 from it. Shadow slots get
    influence 0 (and ``k_star = K`` in nearest mode).

    Args:
        queries: (Nq, 3) query positions
        supports: (Ns, 3) support positions
        table: neighbor table of the queries in the supports
        disp: kernel disposition (cell units)
        mode: ``nearest`` keeps only the closest kernel point, ``full`` keeps all K
        cell: cell size of the support layer
        function: influence function of the distance

    Returns:
        InfluenceTable
    """
    if disp.sigma <= 0:
        raise ContractError(f"Influence distance must be positive, got {disp.sigma}")
    if mode not in ("nearest", "full"):
        raise ContractError(f"Unknown influence mode '{mode}', expected nearest or full")
    if table.num_queries != queries.shape[0] or table.num_supports != supports.shape[0]:
        raise DimensionError(
            "Neighbor table does not match the point sets", table.indices.shape, queries.shape, supports.shape
        )

    Nq, H, K = table.num_queries, table.H, disp.K
    valid = table.valid
    padded = np.concatenate([supports, np.zeros((1, 3))], axis=0)
    kernel_points = disp.positions

    dtype = get_default_dtype()
    if mode == "full":
        h = np.zeros((Nq, H, K), dtype=dtype)
    else:
        h = np.zeros((Nq, H), dtype=dtype)
        k_star = np.full((Nq, H), K, dtype=np.int64)

    chunk = max(1, _CHUNK_ENTRIES // max(1, H * K * 3))
    for start in range(0, Nq, chunk):
        stop = min(Nq, start + chunk)
        offsets = (padded[table.indices[start:stop]] - queries[start:stop, None, :]) / cell
        distances = np.sqrt(np.sum((offsets[:, :, None, :] - kernel_points[None, None]) ** 2, axis=-1))
        mask = valid[start:stop]
        if mode == "full":
            values = _influence_values(distances, disp.sigma, function)
            h[start:stop] = np.where(mask[..., None], values, 0.0)
        else:
            # argmin returns the first minimum, so ties go to the smaller kernel index
            nearest = np.argmin(distances, axis=-1)
            d_near = np.take_along_axis(distances, nearest[..., None], axis=-1)[..., 0]
            h[start:stop] = np.where(mask, _influence_values(d_near, disp.sigma, function), 0.0)
            k_star[start:stop] = np.where(mask, nearest, K)

    if mode == "full":
        return InfluenceTable(h=h, k_star=None, mode="full", num_kernel_points=K)
    return InfluenceTable(h=h, k_star=k_star, mode="nearest", num_kernel_points=K)


def _padded(values: np.ndarray) -> np.ndarray:
    return np.concatenate([values, np.zeros((1,) + values.shape[1:], dtype=values.dtype)], axis=0)


def _scatter_rows(n: int, index: np.ndarray, grad: np.ndarray) -> np.ndarray:
    out = np.zeros((n + 1,) + grad.shape[index.ndim :], dtype=grad.dtype)
    np.add.at(out, index, grad)
    return out[:n]


def _check_mode(infl: InfluenceTable, expected: InfluenceMode, op: str) -> None:
    if infl.mode != expected:
        raise ContractError(f"{op} needs a {expected}-mode influence table, got {infl.mode}")


class KPConvDense(Function):
    """Full kernel summation with one dense matrix per kernel point."""

    def forward(self, features, W, index: np.ndarray, h: np.ndarray):
        n_support = features.shape[0]
        K, c_in, c_out = W.shape
        if features.shape[1] != c_in:
            raise DimensionError("Feature width does not match the dense kernel", features.shape, W.shape)
        neighbors = _padded(features)[index]
        weighted = np.einsum("nhk,nhc->nkc", h.astype(features.dtype), neighbors)
        record("influence_multiply", index.size * K * c_in)
        flat = weighted.reshape(weighted.shape[0], K * c_in)
        record("matmul", flat.shape[0] * K * c_in * c_out)
        record_alloc(neighbors, weighted)
        self.n_support, self.index, self.h = n_support, index, h.astype(features.dtype)
        self.flat, self.W = flat, W
        return flat @ W.reshape(K * c_in, c_out)

    def backward(self, grad):
        K, c_in, c_out = self.W.shape
        dW = (self.flat.T @ grad).reshape(K, c_in, c_out)
        dweighted = (grad @ self.W.reshape(K * c_in, c_out).T).reshape(-1, K, c_in)
        dneighbors = np.einsum("nhk,nkc->nhc", self.h, dweighted)
        return _scatter_rows(self.n_support, self.index, dneighbors), dW


class KPConvDepthwiseFull(Function):
    """Depthwise kernel with influences summed over all K kernel points."""

    def forward(self, features, w, index: np.ndarray, h: np.ndarray):
        K, channels = w.shape
        if features.shape[1] != channels:
            raise DimensionError("Feature width does not match the depthwise kernel", features.shape, w.shape)
        neighbors = _padded(features)[index]
        h = h.astype(features.dtype)
        out = np.zeros((index.shape[0], channels), dtype=features.dtype)
        weighted = np.empty((index.shape[0], K, channels), dtype=features.dtype)
        for k in range(K):
            weighted[:, k] = np.einsum("nh,nhc->nc", h[:, :, k], neighbors)
            out += weighted[:, k] * w[k]
        record("influence_multiply", index.size * K * channels)
        record("weight_multiply", index.shape[0] * K * channels)
        record_alloc(neighbors, weighted, out)
        self.n_support, self.index, self.h = features.shape[0], index, h
        self.weighted, self.w = weighted, w
        return out

    def backward(self, grad):
        dw = np.einsum("nkc,nc->kc", self.weighted, grad)
        dweighted = grad[:, None, :] * self.w[None]
        dneighbors = np.einsum("nhk,nkc->nhc", self.h, dweighted)
        return _scatter_rows(self.n_support, self.index, dneighbors), dw


class KPConvNearest(Function):
    """
    Nearest-kernel depthwise operator shared by KPConvD, KPConvX and KPInv.

    Inputs are ``features`` plus any of the depthwise weights ``w`` (K, C) and the modulations
    ``m`` (Nq, K, C_g); a missing ``w`` acts as all-ones weights. Modulation value ``j`` of a
    group covers channels ``j * G`` to ``(j + 1) * G - 1``.
    """

    def forward(
        self, features, *operands, index: np.ndarray, k_star: np.ndarray, h: np.ndarray, has_w: bool, has_m: bool
    ):
        w = operands[0] if has_w else None
        m = operands[-1] if has_m else None
        nq, channels = index.shape[0], features.shape[1]
        if w is not None and w.shape[1] != channels:
            raise DimensionError("Feature width does not match the depthwise kernel", features.shape, w.shape)

        neighbors = _padded(features)[index]
        h = h.astype(features.dtype)[..., None]
        record("influence_multiply", index.size * channels)
        if w is not None:
            effective = _padded(w)[k_star] * h
            record("weight_multiply", index.size * channels)
        else:
            effective = np.broadcast_to(h, neighbors.shape)
        if m is not None:
            if channels % m.shape[2]:
                raise ConfigurationError(
                    f"{channels} channels cannot carry {m.shape[2]} modulation values per kernel point"
                )
            repeat = channels // m.shape[2]
            rows = np.arange(nq)[:, None]
            selected = np.concatenate([m, np.zeros((nq, 1, m.shape[2]), dtype=m.dtype)], axis=1)[rows, k_star]
            expanded = np.repeat(selected, repeat, axis=-1)
            gated = effective * expanded
            record("modulation_apply", index.size * channels)
            self.expanded, self.repeat, self.rows = expanded, repeat, rows
        else:
            gated = effective
        record_alloc(neighbors, gated)

        self.n_support, self.index, self.k_star, self.h = features.shape[0], index, k_star, h
        self.neighbors, self.effective, self.gated = neighbors, effective, gated
        self.w, self.m = w, m
        return np.sum(gated * neighbors, axis=1)

    def backward(self, grad):
        grad = grad[:, None, :]
        grads = [_scatter_rows(self.n_support, self.index, self.gated * grad)]
        signal = self.neighbors * grad
        if self.w is not None:
            dw_slots = signal * self.h
            if self.m is not None:
                dw_slots = dw_slots * self.expanded
            grads.append(_scatter_rows(self.w.shape[0], self.k_star, dw_slots))
        if self.m is not None:
            dexpanded = signal * self.effective
            nq, H, channels = dexpanded.shape
            dselected = dexpanded.reshape(nq, H, channels // self.repeat, self.repeat).sum(axis=-1)
            dm = np.zeros((nq, self.m.shape[1] + 1, self.m.shape[2]), dtype=dselected.dtype)
            np.add.at(dm, (np.broadcast_to(self.rows, self.k_star.shape), self.k_star), dselected)
            grads.append(dm[:, :-1])
        return tuple(grads)


class LocalMaxPool(Function):
    """Per-channel max over the input points of every cell; gradients route to the argmax."""

    def forward(self, features, assignment: np.ndarray, num_outputs: int):
        order = np.argsort(assignment, kind="stable")
        counts = np.bincount(assignment, minlength=num_outputs)
        if np.any(counts == 0):
            raise ContractError("Every pooled output needs at least one input point")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
        ordered = features[order]
        pooled = np.maximum.reduceat(ordered, starts, axis=0) if features.shape[1] else np.zeros((num_outputs, 0))
        is_max = ordered == np.repeat(pooled, counts, axis=0)
        winners = np.where(is_max, np.arange(ordered.shape[0])[:, None], ordered.shape[0])
        if features.shape[1]:
            first = np.minimum.reduceat(winners, starts, axis=0)
        else:
            first = np.zeros((num_outputs, 0), dtype=np.int64)
        self.source = order[first]
        self.n = features.shape[0]
        return pooled.astype(features.dtype)

    def backward(self, grad):
        out = np.zeros((self.n, grad.shape[1]), dtype=grad.dtype)
        columns = np.broadcast_to(np.arange(grad.shape[1]), grad.shape)
        out[self.source, columns] = grad
        return (out,)


def local_max_pool(features: Tensor, pool: PoolMap) -> Tensor:
    """Max-pool the features of every cell onto its output point."""
    if features.shape[0] != pool.num_inputs:
        raise ContractError(f"Pool map expects {pool.num_inputs} input rows, got {features.shape[0]}")
    return LocalMaxPool.apply(features, assignment=pool.assignment, num_outputs=pool.num_outputs)


def kpconv_dense(features: Tensor, table: NeighborTable, infl: InfluenceTable, kernel: DenseKernel) -> Tensor:
    """Standard KPConv: every neighbor is transformed by every kernel matrix, weighted by its influence."""
    _check_mode(infl, "full", "kpconv_dense")
    if infl.num_kernel_points != kernel.K:
        raise DimensionError("Influence table and kernel disagree on K", (infl.num_kernel_points,), kernel.W.shape)
    return KPConvDense.apply(features, kernel.W, index=table.indices, h=infl.h)


def kpconvd_fullsum(features: Tensor, table: NeighborTable, infl: InfluenceTable, kernel: DepthwiseKernel) -> Tensor:
    """Depthwise KPConv summed over every kernel point."""
    _check_mode(infl, "full", "kpconvd_fullsum")
    if infl.num_kernel_points != kernel.K:
        raise DimensionError("Influence table and kernel disagree on K", (infl.num_kernel_points,), kernel.w.shape)
    return KPConvDepthwiseFull.apply(features, kernel.w, index=table.indices, h=infl.h)


def kpconvd(features: Tensor, table: NeighborTable, infl: InfluenceTable, kernel: DepthwiseKernel) -> Tensor:
    """Depthwise KPConv where each neighbor only meets its nearest kernel point."""
    _check_mode(infl, "nearest", "kpconvd")
    return KPConvNearest.apply(
        features, kernel.w, index=table.indices, k_star=infl.k_star, h=infl.h, has_w=True, has_m=False
    )


def generate_modulations(center_features: Tensor, head: ModulationHead) -> Tensor:
    """Sigmoid gates of shape (N, K, C_g) computed from the center features."""
    if center_features.shape[1] != head.channels:
        raise DimensionError("Center features do not match the modulation head", center_features.shape, head.w1.shape)
    hidden = matmul(center_features, head.w1)
    if head.b1 is not None:
        hidden = add(hidden, head.b1)
    hidden = leaky_relu(hidden, head.slope)
    out = matmul(hidden, head.w2)
    if head.b2 is not None:
        out = add(out, head.b2)
    return reshape(sigmoid(out), (center_features.shape[0], head.K, head.group_width))


def _modulations(
    center_features: Tensor, head: ModulationHead, override: "float | np.ndarray | None", num_queries: int
) -> Tensor:
    if override is None:
        if center_features.shape[0] != num_queries:
            raise DimensionError("Center features must have one row per query", center_features.shape, (num_queries,))
        return generate_modulations(center_features, head)
    shape = (num_queries, head.K, head.group_width)
    return Tensor(np.broadcast_to(np.asarray(override), shape).copy(), dtype=center_features.dtype)


def kpconvx(
    features: Tensor,
    center_features: Tensor,
    table: NeighborTable,
    infl: InfluenceTable,
    kernel: DepthwiseKernel,
    head: ModulationHead,
    modulation_override: "float | np.ndarray | None" = None,
) -> Tensor:
    """
    Depthwise nearest-kernel convolution with kernel attention.

    The depthwise weight of the nearest kernel point is gated by modulations generated from the
    center features. ``modulation_override`` replaces the generated modulations with a constant
    (or a full (Nq, K, C_g) array) and skips the modulation head.
    """
    _check_mode(infl, "nearest", "kpconvx")
    if kernel.channels % head.groups or head.channels != kernel.channels:
        raise ConfigurationError(
            f"Kernel width {kernel.channels} does not fit the modulation head ({head.groups} groups)"
        )
    if head.K != kernel.K:
        raise DimensionError("Kernel and modulation head disagree on K", kernel.w.shape, (head.K,))
    m = _modulations(center_features, head, modulation_override, table.num_queries)
    return KPConvNearest.apply(
        features, kernel.w, m, index=table.indices, k_star=infl.k_star, h=infl.h, has_w=True, has_m=True
    )


def kpinv(
    features: Tensor,
    center_features: Tensor,
    table: NeighborTable,
    infl: InfluenceTable,
    head: ModulationHead,
    modulation_override: "float | np.ndarray | None" = None,
) -> Tensor:
    """Kernel point involution: generated modulations only, no static weights."""
    _check_mode(infl, "nearest", "kpinv")
    if features.shape[1] != head.channels:
        raise ConfigurationError(f"Feature width {features.shape[1]} does not fit the modulation head")
    m = _modulations(center_features, head, modulation_override, table.num_queries)
    return KPConvNearest.apply(features, m, index=table.indices, k_star=infl.k_star, h=infl.h, has_w=False, has_m=True)

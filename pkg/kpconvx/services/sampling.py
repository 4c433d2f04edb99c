"""Stacked batches, grid subsampling and radius-truncated neighbor search."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from kpconvx.errors import ContractError, DimensionError
from kpconvx.models.config import settings
from kpconvx.tensorcore import Tensor, row_gather

logger = logging.getLogger(__name__)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@dataclass
class StackedCloud:
    """Variable-length point clouds concatenated along the point axis."""

    points: np.ndarray
    features: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.lengths = np.asarray(self.lengths, dtype=np.int64).reshape(-1)
        features = np.asarray(self.features)
        if features.ndim < 2:
            features = features.reshape(-1, 1) if features.size else np.zeros((self.points.shape[0], 0))
        self.features = features.reshape(features.shape[0], int(np.prod(features.shape[1:])))
        if self.features.shape[0] != self.points.shape[0]:
            raise DimensionError(
                "features and points must have the same row count", self.features.shape, self.points.shape
            )
        if np.any(self.lengths < 0) or int(self.lengths.sum()) != self.points.shape[0]:
            raise ContractError(f"lengths {self.lengths.tolist()} do not sum to {self.points.shape[0]} points")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != self.points.shape[0]:
                raise DimensionError(
                    "labels and points must have the same row count", self.labels.shape, self.points.shape
                )

    @classmethod
    def single(cls, points: np.ndarray, features: np.ndarray | None = None, labels: np.ndarray | None = None):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if features is None:
            features = np.zeros((points.shape[0], 0))
        return cls(points=points, features=features, lengths=np.array([points.shape[0]]), labels=labels)

    @classmethod
    def concat(cls, clouds: list["StackedCloud"]) -> "StackedCloud":
        if not clouds:
            raise ContractError("Cannot stack an empty list of clouds")
        has_labels = all(c.labels is not None for c in clouds)
        return cls(
            points=np.concatenate([c.points for c in clouds]),
            features=np.concatenate([c.features for c in clouds]),
            lengths=np.concatenate([c.lengths for c in clouds]),
            labels=np.concatenate([c.labels for c in clouds]) if has_labels else None,
        )

    @property
    def num_points(self) -> int:
        return int(self.points.shape[0])

    @property
    def num_elements(self) -> int:
        return int(self.lengths.size)

    @property
    def offsets(self) -> np.ndarray:
        """First row of every element."""
        return np.concatenate([[0], np.cumsum(self.lengths)[:-1]]).astype(np.int64)

    @property
    def batch_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_elements), self.lengths)

    def element(self, i: int) -> "StackedCloud":
        start = int(self.offsets[i])
        stop = start + int(self.lengths[i])
        return StackedCloud(
            points=self.points[start:stop],
            features=self.features[start:stop],
            lengths=np.array([stop - start]),
            labels=None if self.labels is None else self.labels[start:stop],
        )

    def split(self) -> list["StackedCloud"]:
        return [self.element(i) for i in range(self.num_elements)]

    def with_features(self, features: np.ndarray) -> "StackedCloud":
        return StackedCloud(points=self.points, features=features, lengths=self.lengths, labels=self.labels)


@dataclass(frozen=True)
class NeighborTable:
    """Fixed-width neighbor indices; slots equal to ``num_supports`` are shadow padding."""

    indices: np.ndarray
    num_supports: int

    @property
    def H(self) -> int:
        return int(self.indices.shape[1])

    @property
    def shadow(self) -> int:
        return self.num_supports

    @property
    def num_queries(self) -> int:
        return int(self.indices.shape[0])

    @property
    def valid(self) -> np.ndarray:
        return self.indices < self.num_supports

    def rows(self, rows: np.ndarray | slice) -> "NeighborTable":
        return NeighborTable(indices=self.indices[rows], num_supports=self.num_supports)


@dataclass(frozen=True)
class PoolMap:
    """Assignment of every input point to the output point of its grid cell."""

    assignment: np.ndarray
    num_outputs: int
    cell_keys: np.ndarray

    @property
    def num_inputs(self) -> int:
        return int(self.assignment.size)

    @property
    def populations(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_outputs)


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


def cell_keys(points: np.ndarray, cell: float, salt: int = 0) -> np.ndarray:
    """64-bit mixed hash of ``floor(p / cell)``; ``salt`` separates batch elements."""
    ijk = np.floor(points / cell).astype(np.int64)
    keys = _splitmix(np.full(points.shape[0], salt, dtype=np.uint64))
    for axis in range(3):
        keys = _splitmix(keys ^ np.ascontiguousarray(ijk[:, axis]).view(np.uint64))
    return keys


def _group_max(values: np.ndarray, order: np.ndarray, starts: np.ndarray) -> np.ndarray:
    if values.shape[1] == 0 or starts.size == 0:
        return np.zeros((starts.size, values.shape[1]), dtype=values.dtype)
    return np.maximum.reduceat(values[order], starts, axis=0)


def grid_subsample(cloud: StackedCloud, cell: float) -> tuple[StackedCloud, PoolMap]:
    """
    Merge the points of every occupied cubic cell into one point, per batch element.

    Positions become the cell centroid, features the per-channel max, labels the majority
    label (ties go to the smallest id).

    Args:
        cloud: stacked input cloud
        cell: cell edge length (same unit as the points)

    Returns:
        The subsampled cloud and the map from input points to output points
    """
    if cell <= 0:
        raise ContractError(f"Cell size must be positive, got {cell}")

    assignment = np.empty(cloud.num_points, dtype=np.int64)
    keys = np.empty(cloud.num_points, dtype=np.uint64)
    out_lengths = np.zeros(cloud.num_elements, dtype=np.int64)
    next_output = 0
    for e, (start, length) in enumerate(zip(cloud.offsets, cloud.lengths)):
        if length == 0:
            continue
        stop = start + length
        element_keys = cell_keys(cloud.points[start:stop], cell, salt=e)
        _, first, inverse = np.unique(element_keys, return_index=True, return_inverse=True)
        # outputs follow the first appearance of their cell, independent of the salt
        local = np.argsort(np.argsort(first, kind="stable"), kind="stable")[inverse.reshape(-1)]
        keys[start:stop] = element_keys
        assignment[start:stop] = local + next_output
        out_lengths[e] = int(local.max()) + 1
        next_output += out_lengths[e]

    counts = np.bincount(assignment, minlength=next_output)
    centroids = np.stack(
        [np.bincount(assignment, weights=cloud.points[:, a], minlength=next_output) for a in range(3)], axis=1
    ) / np.maximum(counts, 1)[:, None]

    order = np.argsort(assignment, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    features = _group_max(cloud.features, order, starts)

    labels = None
    if cloud.labels is not None:
        num_labels = int(cloud.labels.max()) + 1 if cloud.labels.size else 1
        votes = np.bincount(assignment * num_labels + cloud.labels, minlength=next_output * num_labels)
        labels = np.argmax(votes.reshape(next_output, num_labels), axis=1)

    logger.debug("Grid subsampling at cell %.4f: %d -> %d points", cell, cloud.num_points, next_output)
    pooled = StackedCloud(points=centroids, features=features, lengths=out_lengths, labels=labels)
    return pooled, PoolMap(assignment=assignment, num_outputs=int(next_output), cell_keys=keys)


def grid_upsample(coarse_features: Tensor, pool: PoolMap) -> Tensor:
    """Copy the feature of every cell's output point back to each of its input points."""
    if coarse_features.shape[0] != pool.num_outputs:
        raise ContractError(
            f"Pool map expects {pool.num_outputs} coarse rows, got {coarse_features.shape[0]}"
        )
    return row_gather(coarse_features, pool.assignment)


def _sorted_rows(dist: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # ascending distance, ties by smaller index
    order = np.lexsort((idx, dist), axis=-1)
    return np.take_along_axis(dist, order, axis=1), np.take_along_axis(idx, order, axis=1)


def _element_knn(tree: cKDTree, queries: np.ndarray, H: int, r: float, n_support: int) -> np.ndarray:
    bound = np.nextafter(r, np.inf)
    k = min(H + 1, n_support)
    dist, idx = tree.query(queries, k=k, distance_upper_bound=bound, workers=settings.threads)
    dist = dist.reshape(queries.shape[0], k)
    idx = idx.reshape(queries.shape[0], k).astype(np.int64)
    dist, idx = _sorted_rows(dist, idx)

    # a tie across the truncation boundary may hide a smaller index; resolve exactly
    if k > H:
        ambiguous = np.flatnonzero(np.isfinite(dist[:, H]) & (dist[:, H - 1] == dist[:, H]))
        for row in ambiguous:
            candidates = np.asarray(tree.query_ball_point(queries[row], r), dtype=np.int64)
            d = np.linalg.norm(tree.data[candidates] - queries[row], axis=1)
            order = np.lexsort((candidates, d))[:H]
            idx[row, :] = n_support
            idx[row, : order.size] = candidates[order]
            dist[row, :] = np.inf
            dist[row, : order.size] = d[order]

    table = np.full((queries.shape[0], H), n_support, dtype=np.int64)
    width = min(H, k)
    keep = np.isfinite(dist[:, :width]) & (dist[:, :width] <= r)
    table[:, :width] = np.where(keep, idx[:, :width], n_support)
    return table


def knn_truncated(
    queries: np.ndarray,
    supports: np.ndarray,
    lengths_q: np.ndarray,
    lengths_s: np.ndarray,
    H: int,
    r: float,
) -> NeighborTable:
    """
    Up to ``H`` nearest supports within distance ``r`` of every query, per batch element.

    Rows are sorted by ascending distance (ties by smaller support index) and padded with the
    shadow index ``len(supports)``.
    """
    lengths_q = np.asarray(lengths_q, dtype=np.int64)
    lengths_s = np.asarray(lengths_s, dtype=np.int64)
    if H < 1:
        raise ContractError(f"H must be at least 1, got {H}")
    if r <= 0:
        raise ContractError(f"Search radius must be positive, got {r}")
    if lengths_q.size != lengths_s.size:
        raise ContractError(f"Query and support batches differ: {lengths_q.size} vs {lengths_s.size} elements")
    if lengths_q.sum() != queries.shape[0] or lengths_s.sum() != supports.shape[0]:
        raise ContractError("Batch lengths do not match the point counts")

    shadow = supports.shape[0]
    indices = np.full((queries.shape[0], H), shadow, dtype=np.int64)
    q_offsets = np.concatenate([[0], np.cumsum(lengths_q)])
    s_offsets = np.concatenate([[0], np.cumsum(lengths_s)])
    for e in range(lengths_q.size):
        q0, q1 = q_offsets[e], q_offsets[e + 1]
        s0, s1 = s_offsets[e], s_offsets[e + 1]
        if q1 == q0 or s1 == s0:
            continue
        n_support = int(s1 - s0)
        tree = cKDTree(supports[s0:s1])
        local = _element_knn(tree, queries[q0:q1], H, r, n_support)
        indices[q0:q1] = np.where(local < n_support, local + s0, shadow)
    return NeighborTable(indices=indices, num_supports=shadow)


def shadow_gather(features: Tensor, table: NeighborTable) -> Tensor:
    """Neighbor features of shape ``(N_q, H, C)``; shadow slots give zero rows."""
    if features.shape[0] != table.num_supports:
        raise DimensionError(
            "Neighbor table and features disagree on the support count", features.shape, (table.num_supports,)
        )
    return row_gather(features, table.indices)

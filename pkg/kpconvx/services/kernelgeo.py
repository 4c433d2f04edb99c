"""Multi-shell kernel point dispositions: construction, optimization, verification, regions."""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from kpconvx.errors import ContractError, ConvergenceWarning
from kpconvx.models.schemas import DispositionReport, KernelOptimizerConfig

logger = logging.getLogger(__name__)

# accepted steps may raise the energy by at most this much (float64 round-off)
_ENERGY_SLACK = 1e-10


@dataclass(frozen=True)
class KernelDisposition:
    """Kernel point positions (in cell-size units) and their shell structure."""

    positions: np.ndarray
    shell_counts: tuple[int, ...]
    shell_radii: tuple[float, ...]
    radius: float
    sigma: float

    def __post_init__(self):
        self.positions.setflags(write=False)

    @property
    def K(self) -> int:
        return int(self.positions.shape[0])

    @property
    def num_shells(self) -> int:
        return len(self.shell_counts) - 1

    @property
    def shell_index(self) -> np.ndarray:
        """Shell id of every point; 0 for the center point."""
        return np.repeat(np.arange(len(self.shell_counts)), self.shell_counts)

    @property
    def shell_offsets(self) -> list[int]:
        """First point index of every shell (K_j)."""
        return list(np.cumsum([0, *self.shell_counts])[:-1])

    def scaled(self, factor: float) -> "KernelDisposition":
        return KernelDisposition(
            positions=self.positions * factor,
            shell_counts=self.shell_counts,
            shell_radii=tuple(r * factor for r in self.shell_radii),
            radius=self.radius * factor,
            sigma=self.sigma * factor,
        )


@dataclass
class KernelOptimizerState:
    """Running state of the constrained descent."""

    step_size: float
    iteration: int = 0
    energy: float = float("inf")
    forces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    energies: list[float] = field(default_factory=list)
    converged: bool = False
    rejitters: int = 0


def shell_radii(r: float, s: int) -> list[float]:
    """Shell radii spread regularly along the kernel radius: ``r_j = 2j / (2s + 1) * r``."""
    if s < 1:
        raise ContractError("At least one shell is required; the center point is not a shell")
    if r <= 0:
        raise ContractError(f"Kernel radius must be positive, got {r}")
    return [2 * j / (2 * s + 1) * r for j in range(1, s + 1)]


def disposition_energy(positions: np.ndarray) -> tuple[float, np.ndarray]:
    """
    Total repulsive energy ``sum_k sum_{l != k} 1 / |x_l - x_k|`` and its gradient.

    Returns:
        (energy, gradient) with gradient of shape (K, 3)
    """
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt(np.sum(diff**2, axis=-1))
    np.fill_diagonal(dist, np.inf)
    energy = float(np.sum(1.0 / dist))
    # each unordered pair appears twice in the double sum
    gradient = -2.0 * np.sum(diff / dist[..., None] ** 3, axis=1)
    return energy, gradient


def _tangent(gradient: np.ndarray, positions: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(positions, axis=1, keepdims=True)
    unit = np.divide(positions, norms, out=np.zeros_like(positions), where=norms > 0)
    return gradient - np.sum(gradient * unit, axis=1, keepdims=True) * unit


def _project(positions: np.ndarray, radii: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(positions, axis=1, keepdims=True)
    projected = positions / np.where(norms > 0, norms, 1.0) * radii[:, None]
    projected[0] = 0.0
    return projected


def _random_on_shells(rng: np.random.Generator, radii: np.ndarray) -> np.ndarray:
    points = rng.standard_normal((radii.size, 3))
    return _project(points, radii)


def _pairwise_min(positions: np.ndarray) -> float:
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt(np.sum(diff**2, axis=-1))
    np.fill_diagonal(dist, np.inf)
    return float(dist.min())


def optimize_with_state(
    shell_counts: list[int],
    r: float,
    seed: int = 0,
    config: KernelOptimizerConfig | None = None,
) -> tuple[KernelDisposition, KernelOptimizerState]:
    """
    Place kernel points on concentric shells by minimizing the total repulsive energy.

    Every step computes the repulsive forces, keeps only their component tangent to each
    point's shell sphere, moves the points and projects them back onto their shells. The center
    point never moves. Steps that would increase the energy after warm-up are rejected and the
    step size is halved, so the accepted energies form a non-increasing sequence.

    The optimization runs on the unit-radius problem and is scaled by ``r`` at the end, so the
    result for ``a * r`` equals ``a`` times the result for ``r``.

    Args:
        shell_counts: ``[1, N_1, ..., N_s]``
        r: kernel sphere radius (cell-size units)
        seed: seed of the initial positions and of any re-jitter
        config: descent schedule

    Returns:
        The disposition (``sigma = r``) and the final optimizer state, whose energy trace is
        expressed for the unit-radius problem
    """
    config = config or KernelOptimizerConfig()
    if len(shell_counts) < 2 or shell_counts[0] != 1 or any(c < 1 for c in shell_counts):
        raise ContractError(f"shell_counts must look like [1, N1, ..., Ns] with N >= 1, got {shell_counts}")
    if r <= 0:
        raise ContractError(f"Kernel radius must be positive, got {r}")

    unit_radii = np.array([0.0, *shell_radii(1.0, len(shell_counts) - 1)])
    radii = np.repeat(unit_radii, shell_counts)
    rng = np.random.default_rng(seed)
    positions = _random_on_shells(rng, radii)

    state = KernelOptimizerState(step_size=config.step_size)
    state.energy, gradient = disposition_energy(positions)
    state.energies.append(state.energy)

    while state.iteration < config.max_iterations:
        tangent = _tangent(gradient, positions)
        tangent[0] = 0.0
        state.forces = -tangent
        norms = np.linalg.norm(tangent, axis=1)
        if norms.max() < config.tolerance:
            state.converged = True
            break

        moves = np.minimum(state.step_size * norms, config.clip)
        direction = np.divide(tangent, norms[:, None], out=np.zeros_like(tangent), where=norms[:, None] > 0)
        candidate = _project(positions - moves[:, None] * direction, radii)

        if _pairwise_min(candidate) < config.collapse_distance:
            state.rejitters += 1
            logger.warning("Kernel points collapsed at iteration %d, re-jittering", state.iteration)
            candidate = _project(candidate + 1e-3 * rng.standard_normal(candidate.shape), radii)

        energy, candidate_gradient = disposition_energy(candidate)
        state.iteration += 1
        if state.iteration > config.warmup and energy > state.energy + _ENERGY_SLACK:
            state.step_size *= 0.5
            if state.step_size < 1e-12:
                logger.debug("Step size underflow at iteration %d", state.iteration)
                break
            continue

        positions, gradient, state.energy = candidate, candidate_gradient, energy
        state.energies.append(energy)
        state.step_size = min(state.step_size * 1.1, config.step_size)
        logger.debug("iter %5d  energy %.9f  max tangential grad %.3e", state.iteration, energy, norms.max())

    if not state.converged:
        message = f"Kernel optimization for {shell_counts} stopped at {config.max_iterations} iterations"
        logger.warning(message)
        warnings.warn(message, ConvergenceWarning, stacklevel=2)
    else:
        logger.info("Kernel %s converged after %d iterations, E_tot=%.6f", shell_counts, state.iteration, state.energy)

    positions = _project(positions, radii) * r
    disposition = KernelDisposition(
        positions=positions,
        shell_counts=tuple(int(c) for c in shell_counts),
        shell_radii=tuple(shell_radii(r, len(shell_counts) - 1)),
        radius=float(r),
        sigma=float(r),
    )
    return disposition, state


def optimize_disposition(
    shell_counts: list[int], r: float, seed: int = 0, config: KernelOptimizerConfig | None = None
) -> KernelDisposition:
    """Converged multi-shell disposition; see :func:`optimize_with_state`."""
    return optimize_with_state(shell_counts, r, seed, config)[0]


def build_disposition(positions: np.ndarray, shell_counts: list[int], r: float) -> KernelDisposition:
    """Wrap hand-made positions (e.g. read from a file) without optimizing them."""
    positions = np.array(positions, dtype=np.float64)
    if positions.shape != (sum(shell_counts), 3):
        raise ContractError(f"Expected {sum(shell_counts)} x 3 positions, got {positions.shape}")
    return KernelDisposition(
        positions=positions,
        shell_counts=tuple(int(c) for c in shell_counts),
        shell_radii=tuple(shell_radii(r, len(shell_counts) - 1)),
        radius=float(r),
        sigma=float(r),
    )


def verify_disposition(d: KernelDisposition) -> DispositionReport:
    """Compute the invariant metrics of a disposition without modifying it."""
    norms = np.linalg.norm(d.positions, axis=1)
    expected = np.repeat([0.0, *d.shell_radii], d.shell_counts)
    shell_points = d.shell_index > 0
    shell_error = float(np.max(np.abs(norms[shell_points] - expected[shell_points]))) if shell_points.any() else 0.0
    radii_error = float(
        np.max(np.abs(np.array(d.shell_radii) - np.array(shell_radii(d.radius, d.num_shells)))) if d.num_shells else 0.0
    )
    return DispositionReport(
        shell_error_max=shell_error,
        min_pairwise_distance=_pairwise_min(d.positions) if d.K > 1 else float("inf"),
        center_offset=float(norms[0]),
        radii_error_max=radii_error,
        count_consistent=d.K == sum(d.shell_counts),
    )


def nearest_kernel(d: KernelDisposition, probes: np.ndarray) -> np.ndarray:
    """Index of the nearest kernel point for every probe (ties go to the smaller index)."""
    diff = probes[:, None, :] - d.positions[None, :, :]
    return np.argmin(np.sum(diff**2, axis=-1), axis=1)


def nearest_kernel_regions(d: KernelDisposition, probe_resolution: int) -> pd.DataFrame:
    """
    Nearest-kernel assignment on a regular probe grid inside the kernel sphere.

    The grid has ``probe_resolution`` samples per axis over ``[-r, r]`` (cell centers), and only
    probes inside the sphere are kept.

    Returns:
        DataFrame with columns ``x, y, z, region``
    """
    if probe_resolution < 8:
        raise ContractError(f"probe_resolution must be at least 8, got {probe_resolution}")
    ticks = (np.arange(probe_resolution) + 0.5) / probe_resolution * 2 * d.radius - d.radius
    grid = np.stack(np.meshgrid(ticks, ticks, ticks, indexing="ij"), axis=-1).reshape(-1, 3)
    grid = grid[np.sum(grid**2, axis=1) <= d.radius**2]
    chunks = np.array_split(grid, max(1, grid.shape[0] // 65536))
    regions = np.concatenate([nearest_kernel(d, chunk) for chunk in chunks])
    return pd.DataFrame({"x": grid[:, 0], "y": grid[:, 1], "z": grid[:, 2], "region": regions})


def region_volumes(d: KernelDisposition, samples: int = 200_000, seed: int = 0) -> np.ndarray:
    """Monte-Carlo volume fraction of the kernel sphere closest to each kernel point."""
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((samples, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    probes = directions * d.radius * rng.random(samples)[:, None] ** (1 / 3)
    counts = np.bincount(nearest_kernel(d, probes), minlength=d.K)
    return counts / samples

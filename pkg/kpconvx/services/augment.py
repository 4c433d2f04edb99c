"""Geometric augmentations of stacked clouds."""

import math
from typing import Sequence

import numpy as np

from kpconvx.models.schemas import AugmentationConfig
from kpconvx.services.sampling import StackedCloud

SeedLike = int | Sequence[int] | np.random.Generator


def rotation_matrix(angle: float, axis: int = 2) -> np.ndarray:
    """Right-handed rotation of ``angle`` radians about a coordinate axis."""
    c, s = math.cos(angle), math.sin(angle)
    i, j = [a for a in range(3) if a != axis]
    matrix = np.eye(3)
    matrix[i, i], matrix[i, j], matrix[j, i], matrix[j, j] = c, -s, s, c
    return matrix


def to_unit_sphere(points: np.ndarray, radius: float = 1.0) -> np.ndarray:
    centered = points - points.mean(axis=0)
    scale = np.linalg.norm(centered, axis=1).max() if points.shape[0] else 0.0
    return centered * (radius / scale) if scale > 0 else centered


def _augment_points(points: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    # draws happen in a fixed order whatever the settings, so seeds stay aligned
    scale = rng.uniform(cfg.scale_min, cfg.scale_max)
    flip = rng.random() < cfg.flip_p
    noise = rng.standard_normal(points.shape)
    angle = rng.uniform(0.0, 2 * math.pi)

    if cfg.unit_sphere:
        points = to_unit_sphere(points, cfg.unit_sphere_radius)
    points = points * scale
    if flip:
        points = points.copy()
        points[:, cfg.flip_axis] = -points[:, cfg.flip_axis]
    if cfg.jitter_sigma > 0:
        points = points + np.clip(cfg.jitter_sigma * noise, -cfg.jitter_clip, cfg.jitter_clip)
    if cfg.rotate:
        if cfg.rotation_angle is not None:
            angle = cfg.rotation_angle
        if angle != 0.0:
            points = points @ rotation_matrix(angle, cfg.rotate_axis).T
    return points


def augment(cloud: StackedCloud, cfg: AugmentationConfig, seed: SeedLike) -> StackedCloud:
    """
    Apply unit-sphere rescaling (optional), scaling, flipping, jitter and rotation, in that order.

    Every batch element gets its own draw from the seeded generator. Features and labels are
    carried unchanged.
    """
    rng = np.random.default_rng(seed)
    points = np.empty_like(cloud.points)
    for start, length in zip(cloud.offsets, cloud.lengths):
        stop = start + length
        points[start:stop] = _augment_points(cloud.points[start:stop], cfg, rng)
    return StackedCloud(points=points, features=cloud.features, lengths=cloud.lengths, labels=cloud.labels)


def voting_config(cfg: AugmentationConfig, angle: float) -> AugmentationConfig:
    """Deterministic test-time transform: the same normalization as training, one fixed rotation."""
    return AugmentationConfig.identity().model_copy(
        update={
            "unit_sphere": cfg.unit_sphere,
            "unit_sphere_radius": cfg.unit_sphere_radius,
            "rotate_axis": cfg.rotate_axis,
            "rotation_angle": angle,
        }
    )

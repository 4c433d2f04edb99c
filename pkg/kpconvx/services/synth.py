"""Desk-scale synthetic datasets built from labeled geometric primitives."""

import logging
import math
from dataclasses import dataclass

import numpy as np

from kpconvx.models.schemas import SyntheticSpec
from kpconvx.services.augment import rotation_matrix
from kpconvx.services.sampling import StackedCloud

logger = logging.getLogger(__name__)

SEGMENTATION_PRIMITIVES = ("plane", "sphere_patch", "edge", "corner")
CLASSIFICATION_SHAPES = ("sphere", "cube", "cylinder", "cone", "torus", "slab")

# primitive half-extent and distance of the primitive centers from the cloud center, meters
_PRIMITIVE_SIZE = 0.3
_LAYOUT_RADIUS = 0.9


@dataclass
class SyntheticDataset:
    """Train and validation clouds, one batch element each."""

    task: str
    num_classes: int
    train: list[StackedCloud]
    val: list[StackedCloud]

    @property
    def class_names(self) -> tuple[str, ...]:
        names = SEGMENTATION_PRIMITIVES if self.task == "segmentation" else CLASSIFICATION_SHAPES
        return names[: self.num_classes]


# Segmentation primitives, sampled around the origin


def _plane(rng: np.random.Generator, n: int) -> np.ndarray:
    uv = rng.uniform(-_PRIMITIVE_SIZE, _PRIMITIVE_SIZE, (n, 2))
    return np.column_stack([uv, np.zeros(n)])


def _sphere_patch(rng: np.random.Generator, n: int) -> np.ndarray:
    radius = _PRIMITIVE_SIZE
    # uniform on the cap of polar angle below 70 degrees
    cos_min = math.cos(math.radians(70))
    cos_theta = rng.uniform(cos_min, 1.0, n)
    phi = rng.uniform(0, 2 * math.pi, n)
    sin_theta = np.sqrt(1 - cos_theta**2)
    return radius * np.column_stack([sin_theta * np.cos(phi), sin_theta * np.sin(phi), cos_theta - cos_min])


def _edge(rng: np.random.Generator, n: int) -> np.ndarray:
    first = rng.random(n) < 0.5
    a = rng.uniform(0, _PRIMITIVE_SIZE, n)
    b = rng.uniform(-_PRIMITIVE_SIZE, _PRIMITIVE_SIZE, n)
    zeros = np.zeros(n)
    return np.where(first[:, None], np.column_stack([a, b, zeros]), np.column_stack([zeros, b, a]))


def _corner(rng: np.random.Generator, n: int) -> np.ndarray:
    face = rng.integers(0, 3, n)
    uv = rng.uniform(0, _PRIMITIVE_SIZE, (n, 2))
    points = np.zeros((n, 3))
    for axis in range(3):
        rows = face == axis
        others = [a for a in range(3) if a != axis]
        points[np.ix_(rows, others)] = uv[rows]
    return points


_PRIMITIVES = {"plane": _plane, "sphere_patch": _sphere_patch, "edge": _edge, "corner": _corner}


def _segmentation_cloud(spec: SyntheticSpec, rng: np.random.Generator) -> StackedCloud:
    n_classes = spec.num_classes
    shares = np.full(n_classes, spec.points_per_cloud // n_classes)
    shares[: spec.points_per_cloud % n_classes] += 1
    base_angle = rng.uniform(0, 2 * math.pi)
    points, labels = [], []
    for label, (name, count) in enumerate(zip(SEGMENTATION_PRIMITIVES, shares)):
        primitive = _PRIMITIVES[name](rng, int(count))
        primitive = primitive @ rotation_matrix(rng.uniform(0, 2 * math.pi), 2).T
        angle = base_angle + 2 * math.pi * label / n_classes
        center = np.array([_LAYOUT_RADIUS * math.cos(angle), _LAYOUT_RADIUS * math.sin(angle), 0.0])
        points.append(primitive + center + rng.uniform(-0.05, 0.05, 3))
        labels.append(np.full(int(count), label))
    points = np.concatenate(points)
    if spec.noise > 0:
        points = points + rng.normal(0, spec.noise, points.shape)
    return StackedCloud.single(points, labels=np.concatenate(labels))


# Classification shapes, sampled on their surfaces


def _shape_points(name: str, rng: np.random.Generator, n: int) -> np.ndarray:
    if name == "sphere":
        d = rng.standard_normal((n, 3))
        return 0.5 * d / np.linalg.norm(d, axis=1, keepdims=True)
    if name == "cube":
        p = rng.uniform(-0.4, 0.4, (n, 3))
        axis = rng.integers(0, 3, n)
        p[np.arange(n), axis] = np.where(rng.random(n) < 0.5, -0.4, 0.4)
        return p
    if name == "cylinder":
        phi = rng.uniform(0, 2 * math.pi, n)
        return np.column_stack([0.3 * np.cos(phi), 0.3 * np.sin(phi), rng.uniform(-0.5, 0.5, n)])
    if name == "cone":
        # area-uniform along the slant: radius grows linearly with the distance to the apex
        t = np.sqrt(rng.random(n))
        phi = rng.uniform(0, 2 * math.pi, n)
        return np.column_stack([0.4 * t * np.cos(phi), 0.4 * t * np.sin(phi), 0.5 - t])
    if name == "torus":
        u, v = rng.uniform(0, 2 * math.pi, (2, n))
        ring = 0.35 + 0.12 * np.cos(v)
        return np.column_stack([ring * np.cos(u), ring * np.sin(u), 0.12 * np.sin(v)])
    if name == "slab":
        return np.column_stack([rng.uniform(-0.5, 0.5, (n, 2)), rng.uniform(-0.03, 0.03, n)])
    raise ValueError(f"Unknown shape '{name}'")


def _classification_cloud(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> StackedCloud:
    points = _shape_points(CLASSIFICATION_SHAPES[label], rng, spec.points_per_cloud)
    points = points * rng.uniform(0.8, 1.2) @ rotation_matrix(rng.uniform(0, 2 * math.pi), 2).T
    if spec.noise > 0:
        points = points + rng.normal(0, spec.noise, points.shape)
    return StackedCloud.single(points, labels=np.full(spec.points_per_cloud, label))


def synth_generate(spec: SyntheticSpec) -> SyntheticDataset:
    """
    Generate train and validation clouds from the seed.

    Segmentation clouds hold every primitive class with an equal point share. Classification
    clouds hold one shape each, with classes cycled so the label histogram is balanced.
    """
    rng = np.random.default_rng(spec.seed)
    total = spec.train_clouds + spec.val_clouds
    if spec.task == "segmentation":
        clouds = [_segmentation_cloud(spec, rng) for _ in range(total)]
    else:
        train_labels = np.arange(spec.train_clouds) % spec.num_classes
        val_labels = np.arange(spec.val_clouds) % spec.num_classes
        labels = np.concatenate([rng.permutation(train_labels), rng.permutation(val_labels)])
        clouds = [_classification_cloud(spec, int(label), rng) for label in labels]
    logger.info("Generated %d %s clouds (%d train, %d val)", total, spec.task, spec.train_clouds, spec.val_clouds)
    return SyntheticDataset(
        task=spec.task, num_classes=spec.num_classes, train=clouds[: spec.train_clouds], val=clouds[spec.train_clouds :]
    )

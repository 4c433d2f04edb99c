"""Pytest configuration and fixtures for testing."""

import numpy as np
import pytest

from kpconvx.models.schemas import SyntheticSpec
from kpconvx.services.kernelgeo import build_disposition, optimize_disposition
from kpconvx.services.sampling import StackedCloud
from kpconvx.services.synth import synth_generate
from kpconvx.tensorcore import default_dtype


@pytest.fixture
def rng():
    """Return a seeded random generator."""
    return np.random.default_rng(0)


@pytest.fixture
def float64():
    """Run the test body with 64-bit default precision."""
    with default_dtype("float64"):
        yield


@pytest.fixture(scope="session")
def octahedron():
    """Return a hand-built [1, 6] disposition of radius 1.5 (shell radius 1)."""
    positions = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)
    return build_disposition(positions, [1, 6], 1.5)


@pytest.fixture(scope="session")
def kernel43():
    """Return an optimized [1, 14, 28] disposition of radius 2.1."""
    return optimize_disposition([1, 14, 28], 2.1, seed=0)


@pytest.fixture
def two_clouds():
    """Return a stacked batch of two random clouds with 3 feature channels."""
    gen = np.random.default_rng(7)
    a = StackedCloud.single(
        gen.uniform(0, 1, (60, 3)), features=gen.standard_normal((60, 3)), labels=gen.integers(0, 3, 60)
    )
    b = StackedCloud.single(
        gen.uniform(0, 1, (40, 3)), features=gen.standard_normal((40, 3)), labels=gen.integers(0, 3, 40)
    )
    return StackedCloud.concat([a, b])


@pytest.fixture(scope="session")
def tiny_seg_data():
    """Return a small synthetic segmentation dataset."""
    return synth_generate(
        SyntheticSpec(task="segmentation", num_classes=4, train_clouds=4, val_clouds=2, points_per_cloud=512)
    )


@pytest.fixture(scope="session")
def tiny_cls_data():
    """Return a small synthetic classification dataset."""
    return synth_generate(
        SyntheticSpec(task="classification", num_classes=6, train_clouds=6, val_clouds=6, points_per_cloud=256)
    )

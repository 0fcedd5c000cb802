"""
Shared test fixtures and configuration for pytest.

This file is automatically loaded by pytest and provides fixtures
available to all test files.
"""

import numpy as np
import pytest

from alignment.services import tess_s3
from alignment.services.mixtures import GaussMixture, VmfMixture
from alignment.services.synthetic import rigid_copy, rotation_about_random_axis, three_patch_surface


@pytest.fixture(scope='session')
def tessellation():
    """The 600-cell, built once per test session."""
    return tess_s3.generate_600cell()


@pytest.fixture
def rng():
    """Seeded random generator so every test is reproducible."""
    return np.random.default_rng(20240611)


@pytest.fixture
def two_component_vmf():
    """Two well separated vMF components."""
    return VmfMixture(
        means=np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]),
        taus=np.array([12.0, 30.0]),
        weights=np.array([0.6, 0.4]),
    )


@pytest.fixture
def two_component_gmm():
    """Two Gaussian blobs with different shapes."""
    return GaussMixture(
        means=np.array([[0.0, 0.0, 0.0], [1.0, 0.5, -0.2]]),
        covariances=np.array([
            np.diag([0.04, 0.02, 0.01]),
            [[0.05, 0.01, 0.0], [0.01, 0.03, 0.0], [0.0, 0.0, 0.02]],
        ]),
        weights=np.array([0.7, 0.3]),
    )


@pytest.fixture
def surface(rng):
    """Synthetic floor/wall/ramp surface with analytic normals."""
    return three_patch_surface(rng, count=600)


@pytest.fixture
def moved_surface(surface, rng):
    """
    (source, target, R0, t0) with target = R0 source + t0.

    Aligning target onto source should recover q = R0^-1, t = -R0^-1 t0.
    """
    rotation = rotation_about_random_axis(rng, 50.0)
    translation = np.array([0.3, -0.2, 0.15])
    return surface, rigid_copy(surface, rotation, translation), rotation, translation

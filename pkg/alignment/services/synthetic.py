"""
Synthetic ground-truth surfaces for end-to-end alignment checks.

The three-patch surface (floor, wall, ramp) has patches of different areas
and pairwise angles, so no rotation other than the identity maps it onto
itself.
"""

import math

import numpy as np

from alignment.services.mixtures import WeightedCloud
from alignment.services.numerics import UnitQuaternion, rotate

RAMP_ANGLE = math.radians(35.0)

# (origin, first edge, second edge, outward normal) per patch
_PATCHES = (
    (np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.7, 0.0]),
     np.array([0.0, 0.0, 1.0])),
    (np.array([0.0, 0.0, 0.0]), np.array([0.0, 0.7, 0.0]), np.array([0.0, 0.0, 0.45]),
     np.array([1.0, 0.0, 0.0])),
    (np.array([0.3, 0.7, 0.0]), np.array([0.7, 0.0, 0.0]),
     0.4 * np.array([0.0, math.cos(RAMP_ANGLE), math.sin(RAMP_ANGLE)]),
     np.array([0.0, -math.sin(RAMP_ANGLE), math.cos(RAMP_ANGLE)])),
)


def three_patch_surface(rng, count=2000, noise=0.0):
    """
    Sample the floor / wall / ramp surface with points proportional to patch area.

    Args:
        rng: numpy Generator
        count: Total number of points
        noise: Standard deviation of Gaussian noise along each patch normal

    Returns:
        WeightedCloud with analytic unit normals (weights left unset)
    """
    areas = np.array([np.linalg.norm(np.cross(a, b)) for _, a, b, _ in _PATCHES])
    counts = np.floor(count * areas / areas.sum()).astype(int)
    counts[0] += count - counts.sum()

    points, normals = [], []
    for (origin, edge_a, edge_b, normal), patch_count in zip(_PATCHES, counts):
        s = rng.random((patch_count, 1))
        u = rng.random((patch_count, 1))
        offsets = rng.normal(0.0, noise, (patch_count, 1)) if noise > 0 else 0.0
        points.append(origin + s * edge_a + u * edge_b + offsets * normal)
        normals.append(np.tile(normal, (patch_count, 1)))
    return WeightedCloud(points=np.vstack(points), normals=np.vstack(normals))


def rotation_about_random_axis(rng, angle_deg):
    """Rotation by angle_deg about a uniformly random axis."""
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    half = math.radians(angle_deg) / 2.0
    return UnitQuaternion(*(math.sin(half) * axis), math.cos(half))


def rigid_copy(cloud, q, t):
    """Cloud moved by x -> q o x + t, normals rotated with it."""
    return WeightedCloud(
        points=rotate(q, cloud.points) + np.asarray(t, dtype=float),
        normals=None if cloud.normals is None else rotate(q, cloud.normals),
        weights=None if cloud.weights is None else cloud.weights.copy(),
    )

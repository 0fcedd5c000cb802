"""
Axis-aligned box cover of translation space with octree refinement.
"""

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from itertools import product

import numpy as np

from alignment.exceptions import EmptyCloudError

logger = logging.getLogger(__name__)

_OCTANTS = np.array(list(product([0, 1], repeat=3)))


@dataclass(frozen=True, eq=False)
class BoxNode:
    """
    Translation cell [lo, hi] at a refinement depth.

    Args:
        lo: (3,) lower corner
        hi: (3,) upper corner, componentwise >= lo
        depth: Number of octree splits from the root box
    """

    lo: np.ndarray
    hi: np.ndarray
    depth: int = 0

    @cached_property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @cached_property
    def diagonal(self):
        return float(np.linalg.norm(self.hi - self.lo))

    @cached_property
    def volume(self):
        return float(np.prod(self.hi - self.lo))

    @cached_property
    def corners(self):
        """(8, 3) vertices of the box."""
        return np.where(_OCTANTS == 0, self.lo, self.hi)

    def contains(self, t, tolerance=1e-12):
        t = np.asarray(t, dtype=float)
        return bool(np.all(t >= self.lo - tolerance) and np.all(t <= self.hi + tolerance))

    def as_dict(self):
        return {'lo': self.lo.tolist(), 'hi': self.hi.tolist()}


def _bounds(points, label):
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or len(points) == 0:
        raise EmptyCloudError(f"{label} has no points")
    return points.min(axis=0), points.max(axis=0)


def initial_box(cloud1, cloud2_rotated):
    """
    Minkowski-difference root box.

    Every translation t with a = b + t for some a in cloud1 and b in the
    rotated cloud2 lies in [min(cloud1) - max(cloud2), max(cloud1) - min(cloud2)].

    Raises:
        EmptyCloudError: Either cloud is empty
    """
    lo1, hi1 = _bounds(cloud1, 'Source cloud')
    lo2, hi2 = _bounds(cloud2_rotated, 'Rotated target cloud')
    return BoxNode(lo=lo1 - hi2, hi=hi1 - lo2, depth=0)


def union_box(cloud1, cloud2_rotated):
    """Bounding box enclosing both clouds (the --paper-box root)."""
    lo1, hi1 = _bounds(cloud1, 'Source cloud')
    lo2, hi2 = _bounds(cloud2_rotated, 'Rotated target cloud')
    return BoxNode(lo=np.minimum(lo1, lo2), hi=np.maximum(hi1, hi2), depth=0)


def subdivide(box):
    """Eight octants split at the box midpoint, each with half the diagonal."""
    mid = box.center
    children = []
    for octant in _OCTANTS:
        lo = np.where(octant == 0, box.lo, mid)
        hi = np.where(octant == 0, mid, box.hi)
        children.append(BoxNode(lo=lo, hi=hi, depth=box.depth + 1))
    return children


def trans_depth_for_tolerance(eps, gamma0):
    """N = max(0, ceil(log2(gamma0 / eps))); a zero-diagonal root needs no refinement."""
    if eps <= 0:
        raise ValueError(f"Translational tolerance must be positive, got {eps}")
    if gamma0 <= 0:
        return 0
    return max(0, math.ceil(math.log2(gamma0 / eps) - 1e-9))

"""
Density surrogates for the two alignment stages.

Point clouds become weighted clouds (kNN+PCA normals, fifth-nearest-neighbour
area weights), then DP-vMF-means / DP-means clusterings, then maximum
likelihood vMF mixtures of normals and Gaussian mixtures of points.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from alignment.exceptions import EmptyCloudError

logger = logging.getLogger(__name__)

MAX_CLUSTER_ITERATIONS = 100
DEGENERATE_EIGEN_RATIO = 1e-12
WEIGHT_NEIGHBOR_RANK = 5


@dataclass
class WeightedCloud:
    """
    Points with unit normals and nonnegative area weights.

    Args:
        points: (N, 3)
        normals: (N, 3) unit vectors, or None until estimated
        weights: (N,) nonnegative, or None until computed
        degenerate: (N,) True where a normal could not be estimated
    """

    points: np.ndarray
    normals: np.ndarray = None
    weights: np.ndarray = None
    degenerate: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)

    def __len__(self):
        return len(self.points)

    def subsample(self, rng, max_points):
        """Uniform random subset of at most max_points, in original order."""
        if max_points is None or len(self) <= max_points:
            return self
        keep = np.sort(rng.choice(len(self), size=max_points, replace=False))
        return WeightedCloud(
            points=self.points[keep],
            normals=None if self.normals is None else self.normals[keep],
            weights=None if self.weights is None else self.weights[keep],
            degenerate=None if self.degenerate is None else self.degenerate[keep],
        )


@dataclass
class VmfMixture:
    """vMF mixture over S2: means (K, 3), concentrations taus (K,), weights (K,) summing to 1."""

    means: np.ndarray
    taus: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.weights)


@dataclass
class GaussMixture:
    """Gaussian mixture over R3: means (K, 3), covariances (K, 3, 3), weights (K,) summing to 1."""

    means: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.weights)


@dataclass
class Clustering:
    labels: np.ndarray
    centers: np.ndarray
    iterations: int = 0
    objective_trace: list = field(default_factory=list)

    @property
    def count(self):
        return len(self.centers)


def _neighbor_tree(points, min_points, purpose):
    points = np.asarray(points, dtype=float)
    if len(points) < min_points:
        raise EmptyCloudError(f"{purpose} needs at least {min_points} points, got {len(points)}")
    return points, cKDTree(points)


def estimate_normals(points, k=10, viewpoint=None):
    """
    Surface normals from PCA of each point's k nearest neighbours.

    The normal is the eigenvector of the smallest eigenvalue of the
    neighbourhood covariance. It is oriented so that (viewpoint - p)^T n >= 0;
    without a viewpoint, normals point away from the cloud centroid.

    Args:
        points: (N, 3) with N > k
        k: Neighbours per point, excluding the point itself
        viewpoint: Optional (3,) sensor position

    Returns:
        (normals (N, 3), degenerate (N,) bool). Degenerate neighbourhoods
        (second-smallest eigenvalue <= 1e-12 * trace) get normal +z.
    """
    points, tree = _neighbor_tree(points, k + 1, 'Normal estimation')
    _, idx = tree.query(points, k=k + 1)

    neighbors = points[idx]
    centered = neighbors - neighbors.mean(axis=1, keepdims=True)
    covariance = np.einsum('nki,nkj->nij', centered, centered) / (k + 1)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    normals = eigenvectors[:, :, 0].copy()

    trace = eigenvalues.sum(axis=1)
    degenerate = eigenvalues[:, 1] <= DEGENERATE_EIGEN_RATIO * trace
    normals[degenerate] = np.array([0.0, 0.0, 1.0])

    if viewpoint is None:
        reference = points - points.mean(axis=0)
    else:
        reference = np.asarray(viewpoint, dtype=float) - points
    flip = np.sum(reference * normals, axis=1) < 0
    normals[flip & ~degenerate] *= -1

    if degenerate.any():
        logger.warning(f"{int(degenerate.sum())} of {len(points)} points have degenerate neighbourhoods; normal set to +z")
    return normals, degenerate


def point_weights(points):
    """
    Area weight w_i = r_i^2 with r_i the distance to the fifth nearest neighbour.

    Duplicates count as neighbours at distance 0, so a point with five
    duplicates has weight 0.
    """
    points, tree = _neighbor_tree(points, WEIGHT_NEIGHBOR_RANK + 1, 'Point weighting')
    distances, _ = tree.query(points, k=WEIGHT_NEIGHBOR_RANK + 1)
    return distances[:, WEIGHT_NEIGHBOR_RANK] ** 2


def _weighted_sums(values, weights, labels, count):
    sums = np.zeros((count, values.shape[1]))
    np.add.at(sums, labels, weights[:, None] * values)
    masses = np.bincount(labels, weights=weights, minlength=count)
    return sums, masses


def _relabel(labels):
    """Drop empty clusters and renumber labels contiguously in first-use order."""
    _, first_seen, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(first_seen, kind='stable')
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return rank[inverse].reshape(labels.shape)


def _dp_cluster(data, weights, cost, penalty, center_of):
    """
    Shared small-variance-asymptotics loop.

    Minimizes sum_i w_i * cost(x_i, center) + penalty * clusters. Points are
    visited one at a time in input order, starting from a single cluster: a
    point moves to the existing center with the lowest weighted cost, or
    spawns a cluster at itself when every weighted cost exceeds the penalty.
    The centers it leaves and joins are re-estimated at once and emptied
    clusters dropped, so the objective never increases. Passes repeat until
    no point moves or 100 passes.
    """
    labels = np.zeros(len(data), dtype=np.int64)
    centers = [center_of(data, weights)]
    sizes = [len(data)]
    trace = []
    iteration = 0

    def refresh(cluster):
        members = np.flatnonzero(labels == cluster)
        centers[cluster] = center_of(data[members], weights[members])

    for iteration in range(1, MAX_CLUSTER_ITERATIONS + 1):
        moved = 0
        for index in range(len(data)):
            current = int(labels[index])
            weighted = weights[index] * cost(data[index:index + 1], np.array(centers))[0]
            # A singleton gives its penalty back when it leaves.
            refund = penalty if sizes[current] == 1 else 0.0
            stay = weighted[current]
            others = weighted.copy()
            others[current] = np.inf
            best = int(np.argmin(others))
            join = others[best] - refund
            spawn = penalty - refund
            if min(join, spawn) >= stay:
                continue
            if spawn < join:
                centers.append(data[index].copy())
                sizes.append(0)
                best = len(centers) - 1
            labels[index] = best
            sizes[current] -= 1
            sizes[best] += 1
            moved += 1
            refresh(best)
            if sizes[current] == 0:
                del centers[current]
                del sizes[current]
                labels[labels > current] -= 1
            else:
                refresh(current)
        own = cost(data, np.array(centers))[np.arange(len(data)), labels]
        trace.append(float(np.sum(weights * own) + penalty * len(centers)))
        if not moved:
            break
    else:
        logger.warning(f"DP clustering stopped after {MAX_CLUSTER_ITERATIONS} iterations without converging")

    relabeled = _relabel(labels)
    order = labels[np.unique(relabeled, return_index=True)[1]]
    return Clustering(labels=relabeled, centers=np.array(centers)[order], iterations=iteration, objective_trace=trace)


def _normalized_weights(weights, count):
    if weights is None:
        return np.ones(count)
    weights = np.asarray(weights, dtype=float)
    if weights.sum() <= 0:
        return np.ones(count)
    return weights


def dp_vmf_means(normals, weights=None, lambda_deg=65.0):
    """
    DP-vMF-means clustering of unit normals.

    A normal with weight w moves to the direction minimizing w * (1 - dot)
    and starts a new cluster when that cost exceeds 1 - cos(lambda). Cluster
    directions are normalized weighted sums.

    Args:
        normals: (N, 3) unit vectors
        weights: (N,) nonnegative weights, uniform when omitted
        lambda_deg: Angular cluster scale in (0, 180) degrees

    Returns:
        Clustering with labels and unit centers
    """
    if not 0.0 < lambda_deg < 180.0:
        raise ValueError(f"lambda_deg must lie in (0, 180), got {lambda_deg}")
    normals = np.asarray(normals, dtype=float)
    weights = _normalized_weights(weights, len(normals))
    penalty = 1.0 - math.cos(math.radians(lambda_deg))

    def cost(data, centers):
        return 1.0 - data @ centers.T

    def center_of(members, w):
        total = (w[:, None] * members).sum(axis=0) if w.sum() > 0 else members.sum(axis=0)
        norm = np.linalg.norm(total)
        # Antipodal members cancel out; keep the first member's direction.
        return total / norm if norm > 1e-12 else members[0].copy()

    clustering = _dp_cluster(normals, weights, cost, penalty, center_of)
    logger.debug(f"DP-vMF-means lambda={lambda_deg} deg: {clustering.count} clusters in {clustering.iterations} iterations")
    return clustering


def dp_means(points, weights=None, lambda_len=1.0):
    """
    DP-means clustering of points.

    A point with weight w moves to the center minimizing w * d^2 and becomes
    a new center when that cost exceeds lambda^2.
    """
    if lambda_len <= 0:
        raise ValueError(f"lambda_len must be positive, got {lambda_len}")
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    weights = _normalized_weights(weights, len(points))

    def cost(data, centers):
        return np.sum((data[:, None, :] - centers[None, :, :]) ** 2, axis=-1)

    def center_of(members, w):
        mass = w.sum()
        if mass > 0:
            return (w[:, None] * members).sum(axis=0) / mass
        return members.mean(axis=0)

    clustering = _dp_cluster(points, weights, cost, lambda_len ** 2, center_of)
    logger.debug(f"DP-means lambda={lambda_len}: {clustering.count} clusters in {clustering.iterations} iterations")
    return clustering


def _cluster_masses(weights, labels):
    count = int(labels.max()) + 1
    masses = np.bincount(labels, weights=weights, minlength=count)
    keep = masses > 0
    if not keep.all():
        logger.debug(f"Dropping {int((~keep).sum())} clusters with zero weight mass")
    return count, masses, keep


def fit_vmf_mixture(normals, weights, labels, tau_min=1e-2, tau_max=1e3):
    """
    Maximum likelihood vMF mixture from a hard clustering.

    tau follows the approximation r(3 - r^2) / (1 - r^2) with r the weighted
    mean resultant length, clamped to [tau_min, tau_max].
    """
    normals = np.asarray(normals, dtype=float)
    weights = _normalized_weights(weights, len(normals))
    labels = np.asarray(labels)
    count, masses, keep = _cluster_masses(weights, labels)

    sums, _ = _weighted_sums(normals, weights, labels, count)
    norms = np.linalg.norm(sums, axis=1)
    safe_masses = np.where(masses > 0, masses, 1.0)
    resultant = np.clip(norms / safe_masses, 0.0, 1.0)
    with np.errstate(divide='ignore', invalid='ignore'):
        taus = resultant * (3.0 - resultant ** 2) / (1.0 - resultant ** 2)
    taus = np.where(np.isfinite(taus), taus, tau_max)
    taus = np.clip(taus, tau_min, tau_max)

    means = sums / np.where(norms > 1e-12, norms, 1.0)[:, None]
    means[norms <= 1e-12] = np.array([0.0, 0.0, 1.0])

    mixture = VmfMixture(
        means=means[keep],
        taus=taus[keep],
        weights=masses[keep] / masses[keep].sum(),
    )
    return mixture


def fit_gauss_mixture(points, weights, labels, sigma_floor_sq=0.0):
    """
    Maximum likelihood Gaussian mixture from a hard clustering.

    Covariances are weighted ML estimates plus sigma_floor_sq * I.
    """
    points = np.asarray(points, dtype=float)
    weights = _normalized_weights(weights, len(points))
    labels = np.asarray(labels)
    count, masses, keep = _cluster_masses(weights, labels)

    sums, _ = _weighted_sums(points, weights, labels, count)
    safe_masses = np.where(masses > 0, masses, 1.0)
    means = sums / safe_masses[:, None]
    centered = points - means[labels]
    scatter = np.zeros((count, 3, 3))
    np.add.at(scatter, labels, weights[:, None, None] * np.einsum('ni,nj->nij', centered, centered))
    covariances = scatter / safe_masses[:, None, None] + sigma_floor_sq * np.eye(3)
    covariances = 0.5 * (covariances + np.swapaxes(covariances, -1, -2))

    return GaussMixture(
        means=means[keep],
        covariances=covariances[keep],
        weights=masses[keep] / masses[keep].sum(),
    )


def build_vmf_mixture(cloud, lambda_deg, tau_min=1e-2, tau_max=1e3):
    clustering = dp_vmf_means(cloud.normals, cloud.weights, lambda_deg)
    return fit_vmf_mixture(cloud.normals, cloud.weights, clustering.labels, tau_min, tau_max)


def build_gauss_mixture(cloud, lambda_len, sigma_floor_sq):
    clustering = dp_means(cloud.points, cloud.weights, lambda_len)
    return fit_gauss_mixture(cloud.points, cloud.weights, clustering.labels, sigma_floor_sq)

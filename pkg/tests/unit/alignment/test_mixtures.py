"""
Unit tests for normal estimation, area weights, DP clustering and mixture fitting.
"""

import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from alignment.exceptions import EmptyCloudError
from alignment.services.mixtures import (
    WeightedCloud,
    build_gauss_mixture,
    build_vmf_mixture,
    dp_means,
    dp_vmf_means,
    estimate_normals,
    fit_gauss_mixture,
    fit_vmf_mixture,
    point_weights,
)


def _grid(size=10, spacing=0.1):
    x, y = np.meshgrid(np.arange(size) * spacing, np.arange(size) * spacing, indexing='ij')
    return np.column_stack([x.ravel(), y.ravel(), np.zeros(size * size)])


def _sphere(rng, count=400):
    points = rng.standard_normal((count, 3))
    return points / np.linalg.norm(points, axis=1, keepdims=True)


def _bundle(rng, axis, count, spread_deg):
    """Unit vectors within roughly spread_deg of axis."""
    vectors = np.asarray(axis, dtype=float) + math.radians(spread_deg) * 0.5 * rng.standard_normal((count, 3))
    return vectors / np.linalg.norm(vectors, axis=1, keepdims=True)


class TestEstimateNormals:
    """Test kNN + PCA normals and their orientation."""

    def test_plane_normals_face_viewpoint(self):
        normals, degenerate = estimate_normals(_grid(), k=8, viewpoint=(0.5, 0.5, 10.0))
        assert not degenerate.any()
        np.testing.assert_allclose(normals, np.tile([0.0, 0.0, 1.0], (100, 1)), atol=1e-9)

    def test_viewpoint_below_flips_normals(self):
        normals, _ = estimate_normals(_grid(), k=8, viewpoint=(0.5, 0.5, -10.0))
        np.testing.assert_allclose(normals[:, 2], -1.0, atol=1e-9)

    def test_sphere_normals_point_away_from_centroid(self, rng):
        points = _sphere(rng)
        normals, _ = estimate_normals(points, k=10)
        assert np.all(np.sum(normals * points, axis=1) > 0.9)

    def test_rotation_equivariant(self, rng):
        points = _sphere(rng)
        matrix = Rotation.from_rotvec([0.3, -0.5, 0.9]).as_matrix()
        normals, _ = estimate_normals(points, k=10)
        rotated_normals, _ = estimate_normals(points @ matrix.T, k=10)
        np.testing.assert_allclose(rotated_normals, normals @ matrix.T, atol=1e-8)

    def test_collinear_neighbourhoods_are_degenerate(self):
        points = np.column_stack([np.arange(20.0), np.zeros(20), np.zeros(20)])
        normals, degenerate = estimate_normals(points, k=5)
        assert degenerate.all()
        np.testing.assert_array_equal(normals, np.tile([0.0, 0.0, 1.0], (20, 1)))

    def test_too_few_points(self):
        with pytest.raises(EmptyCloudError):
            estimate_normals(np.zeros((5, 3)), k=10)


class TestPointWeights:
    """Test w = squared distance to the fifth nearest neighbour."""

    def test_interior_grid_point(self):
        weights = point_weights(_grid(spacing=0.1))
        interior = 5 * 10 + 5
        # four neighbours at h, then four at sqrt(2) h
        assert weights[interior] == pytest.approx(2 * 0.1 ** 2)

    def test_duplicated_point_has_zero_weight(self):
        points = np.vstack([np.zeros((6, 3)), np.eye(3), 2 * np.eye(3)])
        assert point_weights(points)[0] == 0.0


class TestDpVmfMeans:
    """Test DP-vMF-means on bundles of directions."""

    def test_two_bundles_two_clusters(self, rng):
        normals = np.vstack([_bundle(rng, [0, 0, 1], 100, 5.0), _bundle(rng, [1, 0, 0], 50, 5.0)])
        clustering = dp_vmf_means(normals, lambda_deg=45.0)

        assert clustering.count == 2
        assert np.all(clustering.labels[:100] == clustering.labels[0])
        assert np.all(clustering.labels[100:] != clustering.labels[0])
        np.testing.assert_allclose(np.linalg.norm(clustering.centers, axis=1), 1.0)
        assert clustering.centers[clustering.labels[0]] @ np.array([0, 0, 1]) > 0.99

    def test_small_lambda_splits_more(self, rng):
        normals = np.vstack([_bundle(rng, [0, 0, 1], 100, 20.0), _bundle(rng, [0, 1, 0], 100, 20.0)])
        coarse = dp_vmf_means(normals, lambda_deg=80.0)
        fine = dp_vmf_means(normals, lambda_deg=10.0)
        assert fine.count > coarse.count

    def test_rotation_equivariant_labels(self, rng):
        normals = np.vstack([_bundle(rng, [0, 0, 1], 60, 10.0), _bundle(rng, [0, 1, 0], 40, 10.0)])
        matrix = Rotation.from_rotvec([1.0, 0.2, -0.4]).as_matrix()
        base = dp_vmf_means(normals, lambda_deg=45.0)
        rotated = dp_vmf_means(normals @ matrix.T, lambda_deg=45.0)
        np.testing.assert_array_equal(base.labels, rotated.labels)

    @pytest.mark.parametrize('lambda_deg', [0.0, 180.0, -5.0])
    def test_invalid_lambda(self, lambda_deg):
        with pytest.raises(ValueError):
            dp_vmf_means(np.array([[0.0, 0.0, 1.0]]), lambda_deg=lambda_deg)


class TestDpMeans:
    """Test DP-means on points."""

    def test_one_dimensional_groups(self):
        clustering = dp_means(np.array([0.0, 0.1, 0.2, 10.0, 10.1]), lambda_len=1.0)
        assert clustering.count == 2
        assert clustering.labels.tolist() == [0, 0, 0, 1, 1]
        np.testing.assert_allclose(sorted(clustering.centers[:, 0]), [0.1, 10.05])

    def test_labels_in_first_use_order(self, rng):
        points = np.vstack([rng.normal(5.0, 0.05, (20, 3)), rng.normal(-5.0, 0.05, (20, 3))])
        clustering = dp_means(points, lambda_len=1.0)
        assert clustering.labels[0] == 0
        assert set(clustering.labels.tolist()) == {0, 1}

    def test_invalid_lambda(self):
        with pytest.raises(ValueError):
            dp_means(np.zeros((3, 3)), lambda_len=0.0)


def _weighted_blobs(rng, centers, per_blob=40, spread=0.3):
    points = np.vstack([rng.normal(center, spread, (per_blob, len(center))) for center in centers])
    order = rng.permutation(len(points))
    return points[order], rng.uniform(0.1, 2.0, len(points))


def _assert_nonincreasing(trace):
    assert trace
    steps = np.diff(trace)
    assert np.all(steps <= 1e-9 * max(1.0, abs(trace[0]))), trace


class TestDpObjectiveDescent:
    """The weighted DP objective never increases from one pass to the next."""

    @pytest.mark.parametrize('seed', range(20))
    def test_dp_means_weighted_objective(self, seed):
        rng = np.random.default_rng(seed)
        points, weights = _weighted_blobs(rng, [[0, 0, 0], [3, 0, 0], [0, 3, 0], [0, 0, 3]])
        lambda_len = rng.uniform(0.8, 2.0)
        clustering = dp_means(points, weights, lambda_len=lambda_len)

        _assert_nonincreasing(clustering.objective_trace)
        own = np.sum((points - clustering.centers[clustering.labels]) ** 2, axis=1)
        final = np.sum(weights * own) + lambda_len ** 2 * clustering.count
        assert clustering.objective_trace[-1] == pytest.approx(final)

    @pytest.mark.parametrize('seed', range(20))
    def test_dp_vmf_means_weighted_objective(self, seed):
        rng = np.random.default_rng(seed)
        normals, weights = _weighted_blobs(rng, np.eye(3).tolist() + [[-1, 0, 0]], spread=0.4)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        lambda_deg = rng.uniform(30.0, 80.0)
        clustering = dp_vmf_means(normals, weights, lambda_deg=lambda_deg)

        _assert_nonincreasing(clustering.objective_trace)
        assert set(clustering.labels.tolist()) == set(range(clustering.count))

    def test_heavy_point_spawns_where_light_point_joins(self):
        points = np.array([0.0, 0.0, 0.0, 0.8])
        light = dp_means(points, np.array([1.0, 1.0, 1.0, 0.5]), lambda_len=0.5)
        heavy = dp_means(points, np.array([1.0, 1.0, 1.0, 4.0]), lambda_len=0.5)
        assert light.count == 1
        assert heavy.count == 2


class TestFitVmfMixture:
    """Test the ML vMF fit from a hard clustering."""

    def test_concentration_approximation(self):
        theta = math.acos(0.5)
        normals = np.array([[math.sin(theta), 0.0, 0.5], [-math.sin(theta), 0.0, 0.5]])
        mixture = fit_vmf_mixture(normals, np.ones(2), np.array([0, 0]))

        np.testing.assert_allclose(mixture.means[0], [0.0, 0.0, 1.0], atol=1e-12)
        assert mixture.taus[0] == pytest.approx(0.5 * (3 - 0.25) / 0.75)
        assert mixture.weights.tolist() == [1.0]

    def test_identical_normals_clamp_to_tau_max(self):
        normals = np.tile([0.0, 1.0, 0.0], (5, 1))
        mixture = fit_vmf_mixture(normals, np.ones(5), np.zeros(5, dtype=int), tau_max=250.0)
        assert mixture.taus[0] == 250.0

    def test_opposite_normals_clamp_to_tau_min(self):
        normals = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
        mixture = fit_vmf_mixture(normals, np.ones(2), np.array([0, 0]), tau_min=0.05)
        assert mixture.taus[0] == 0.05
        assert np.linalg.norm(mixture.means[0]) == pytest.approx(1.0)

    def test_zero_weight_cluster_dropped(self):
        normals = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        mixture = fit_vmf_mixture(normals, np.array([1.0, 1.0, 0.0]), np.array([0, 0, 1]))
        assert len(mixture) == 1
        assert mixture.weights.sum() == pytest.approx(1.0)

    def test_weights_follow_cluster_mass(self):
        normals = np.array([[0.0, 0.0, 1.0]] * 3 + [[1.0, 0.0, 0.0]])
        mixture = fit_vmf_mixture(normals, np.ones(4), np.array([0, 0, 0, 1]))
        np.testing.assert_allclose(mixture.weights, [0.75, 0.25])


class TestFitGaussMixture:
    """Test the ML Gaussian fit from a hard clustering."""

    def test_mean_and_covariance_with_floor(self):
        points = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
        mixture = fit_gauss_mixture(points, np.ones(2), np.array([0, 0]), sigma_floor_sq=1e-4)

        np.testing.assert_allclose(mixture.means[0], [1.0, 0.0, 0.0])
        np.testing.assert_allclose(mixture.covariances[0], np.diag([1.0, 0.0, 0.0]) + 1e-4 * np.eye(3))

    def test_weighted_mean(self):
        points = np.array([[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]])
        mixture = fit_gauss_mixture(points, np.array([3.0, 1.0]), np.array([0, 0]))
        np.testing.assert_allclose(mixture.means[0], [1.0, 0.0, 0.0])

    def test_covariances_positive_definite(self, surface):
        mixture = build_gauss_mixture(
            WeightedCloud(points=surface.points, weights=np.ones(len(surface))), 0.3, 1e-6
        )
        assert len(mixture) >= 2
        assert np.all(np.linalg.eigvalsh(mixture.covariances) > 0)
        assert mixture.weights.sum() == pytest.approx(1.0)


class TestBuildMixtures:
    def test_three_patch_surface_gives_three_directions(self, surface):
        cloud = WeightedCloud(points=surface.points, normals=surface.normals, weights=np.ones(len(surface)))
        mixture = build_vmf_mixture(cloud, 20.0)
        assert len(mixture) == 3
        assert np.all(mixture.taus == 1e3)

    def test_subsample_keeps_order(self, surface, rng):
        smaller = surface.subsample(rng, 100)
        assert len(smaller) == 100
        rows = [np.flatnonzero(np.all(surface.points == p, axis=1))[0] for p in smaller.points]
        assert rows == sorted(rows)
        assert surface.subsample(rng, 10_000) is surface

"""
Unit tests for the shared numerical kernels: quaternions, the Xi matrix,
small eigenproblems and the f(z) = 2 sinh(z) / z family.
"""

import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from alignment.exceptions import SingularBError
from alignment.services.numerics import (
    LogScale,
    UnitQuaternion,
    batched_cholesky,
    f_rot,
    gen_eig_pair,
    log_diff_exp,
    log_f_rot,
    log_vmf_const,
    quat_angle,
    quat_multiply,
    quat_to_matrix,
    random_unit_quaternions,
    rotate,
    sym_eig,
    xi_matrix,
)


class TestQuaternions:
    """Test quaternion algebra in (i, j, k, r) order."""

    def test_matrix_matches_scipy(self, rng):
        """quat_to_matrix agrees with scipy's scalar-last convention."""
        q = random_unit_quaternions(rng, 50)
        np.testing.assert_allclose(quat_to_matrix(q), Rotation.from_quat(q).as_matrix(), atol=1e-12)

    def test_product_composes_rotations(self, rng):
        """R(p * q) = R(p) R(q)."""
        p = random_unit_quaternions(rng, 20)
        q = random_unit_quaternions(rng, 20)
        np.testing.assert_allclose(
            quat_to_matrix(quat_multiply(p, q)),
            quat_to_matrix(p) @ quat_to_matrix(q),
            atol=1e-12,
        )

    def test_unit_quaternion_normalizes(self):
        q = UnitQuaternion(0.0, 0.0, 3.0, 4.0)
        assert q.as_list() == pytest.approx([0.0, 0.0, 0.6, 0.8])

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ValueError):
            UnitQuaternion(0.0, 0.0, 0.0, 0.0)

    def test_canonical_has_nonnegative_real_part(self):
        q = UnitQuaternion(0.1, 0.2, 0.3, -0.9).canonical()
        assert q.r > 0
        assert q.angle_to(UnitQuaternion(0.1, 0.2, 0.3, -0.9)) == pytest.approx(0.0, abs=1e-7)

    def test_compose_with_inverse_is_identity(self, rng):
        q = UnitQuaternion.from_array(random_unit_quaternions(rng, 1)[0])
        product = q.compose(q.inverse())
        assert product.angle_to(UnitQuaternion.identity()) == pytest.approx(0.0, abs=1e-7)

    def test_angle_is_sign_invariant(self):
        q = np.array([0.0, 0.0, math.sin(0.25), math.cos(0.25)])
        assert quat_angle(q, np.array([0.0, 0.0, 0.0, 1.0])) == pytest.approx(0.5)
        assert quat_angle(-q, np.array([0.0, 0.0, 0.0, 1.0])) == pytest.approx(0.5)

    def test_rotate_renormalizes_drifted_quaternion(self):
        """A quaternion scaled by 2 still rotates without stretching."""
        q = np.array([0.0, 0.0, math.sin(math.pi / 4), math.cos(math.pi / 4)]) * 2.0
        rotated = rotate(q, np.array([1.0, 0.0, 0.0]))
        np.testing.assert_allclose(rotated, [0.0, 1.0, 0.0], atol=1e-12)


class TestXiMatrix:
    """Test q^T Xi(u, v) q = u^T (q o v)."""

    def test_identity_on_random_triples(self, rng):
        u = rng.standard_normal((1000, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        v = rng.standard_normal((1000, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        q = random_unit_quaternions(rng, 1000)

        xi = xi_matrix(u, v)
        lhs = np.einsum('ni,nij,nj->n', q, xi, q)
        rhs = np.einsum('na,nab,nb->n', u, quat_to_matrix(q), v)
        assert np.max(np.abs(lhs - rhs)) < 1e-12

    def test_symmetric(self, rng):
        xi = xi_matrix(np.array([0.0, 0.6, 0.8]), np.array([1.0, 0.0, 0.0]))
        np.testing.assert_array_equal(xi, xi.T)


class TestEigenproblems:
    """Test the symmetric and generalized eigen solvers."""

    def test_sym_eig_residual_and_orthonormality(self, rng):
        matrix = rng.standard_normal((4, 4))
        matrix = matrix + matrix.T
        values, vectors = sym_eig(matrix)

        assert np.all(np.diff(values) >= 0)
        np.testing.assert_allclose(matrix @ vectors, vectors * values, atol=1e-10)
        np.testing.assert_allclose(vectors.T @ vectors, np.eye(4), atol=1e-12)

    def test_sym_eig_leading_block(self, rng):
        matrix = rng.standard_normal((4, 4))
        matrix = matrix + matrix.T
        values, vectors = sym_eig(matrix, dim=2)
        assert values.shape == (2,)
        np.testing.assert_allclose(matrix[:2, :2] @ vectors, vectors * values, atol=1e-10)

    def test_gen_eig_pair_residual(self, rng):
        a_matrix = rng.standard_normal((3, 3))
        a_matrix = a_matrix + a_matrix.T
        root = rng.standard_normal((3, 3))
        b_matrix = root @ root.T + 3.0 * np.eye(3)

        values, vectors = gen_eig_pair(a_matrix, b_matrix)
        np.testing.assert_allclose(a_matrix @ vectors, b_matrix @ vectors * values, atol=1e-9)
        np.testing.assert_allclose(vectors.T @ b_matrix @ vectors, np.eye(3), atol=1e-9)

    def test_gen_eig_pair_singular_b_raises(self):
        b_matrix = np.array([[1.0, 1.0], [1.0, 1.0]])
        with pytest.raises(SingularBError):
            gen_eig_pair(np.eye(2), b_matrix)

    def test_batched_cholesky_flags_only_singular_blocks(self):
        blocks = np.array([np.eye(2), [[1.0, 1.0], [1.0, 1.0]], [[4.0, 1.0], [1.0, 3.0]]])
        factors, valid = batched_cholesky(blocks)
        assert valid.tolist() == [True, False, True]
        np.testing.assert_allclose(factors[2] @ factors[2].T, blocks[2], atol=1e-12)


class TestRotationKernel:
    """Test f(z) = 2 sinh(z) / z and its logarithm."""

    def test_value_at_zero(self):
        assert f_rot(0.0) == 2.0
        assert log_f_rot(0.0) == pytest.approx(math.log(2.0))

    @pytest.mark.parametrize('z', [1e-6, 9.9e-5, 1e-4, 0.5, 3.0, 40.0])
    def test_matches_direct_formula(self, z):
        assert f_rot(z) == pytest.approx(2.0 * math.sinh(z) / z, rel=1e-12)
        assert log_f_rot(z) == pytest.approx(math.log(2.0 * math.sinh(z) / z), rel=1e-12, abs=1e-14)

    def test_log_form_stays_finite_for_large_arguments(self):
        z = 1e4
        assert math.isfinite(log_f_rot(z))
        assert log_f_rot(z) == pytest.approx(z - math.log(z), rel=1e-12)

    def test_square_root_composition_is_convex(self):
        """Slopes of f(sqrt(z)) never decrease on [1e-6, 100]."""
        z = np.logspace(-6, 2, 400)
        values = f_rot(np.sqrt(z))
        slopes = np.diff(values) / np.diff(z)
        assert np.all(np.diff(slopes) >= -1e-6)

    def test_vmf_constant(self):
        for tau in (0.5, 1.0, 10.0, 200.0):
            expected = math.log(tau) - math.log(4.0 * math.pi) - (tau + math.log1p(-math.exp(-2 * tau)) - math.log(2.0))
            assert log_vmf_const(tau) == pytest.approx(expected, rel=1e-10)
        assert log_vmf_const(0.0) == pytest.approx(-math.log(4.0 * math.pi))


class TestLogHelpers:
    def test_log_diff_exp(self):
        assert float(log_diff_exp(2.0, 1.0)) == pytest.approx(math.log(math.exp(2.0) - math.exp(1.0)))
        assert float(log_diff_exp(1.0, 1.0)) == -math.inf

    def test_log_scale_round_trip(self):
        scale = LogScale.for_translation(np.array([-3.0, 5.0, 1.0]))
        assert scale.log_factor == 5.0
        scaled = np.exp(scale.apply(np.array([5.0])))[0]
        assert scale.unscale(scaled) == pytest.approx(math.exp(5.0))

    def test_rotation_scale_uses_largest_attainable_term(self):
        scale = LogScale.for_rotation(np.array([-1.0, -2.0]), np.array([1.0, 10.0]), np.array([2.0, 10.0]))
        assert scale.log_factor == pytest.approx(18.0)

"""
Shared numerical kernels for both branch-and-bound stages.

Quaternions are stored in (i, j, k, r) order everywhere: arrays, the result
JSON and the tessellation cache. Every kernel accepts leading batch
dimensions so bound evaluation can run over all mixture pairs at once.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from alignment.exceptions import SingularBError

logger = logging.getLogger(__name__)

NORTH = np.array([0.0, 0.0, 0.0, 1.0])

UNIT_NORM_TOLERANCE = 1e-9
SINGULAR_PIVOT_RATIO = 1e-12
TAYLOR_CUTOFF = 1e-4
LOG_4PI = math.log(4.0 * math.pi)
LOG_2 = math.log(2.0)


def normalize_quaternions(q):
    """Scale (..., 4) arrays to unit length."""
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(p, q):
    """Hamilton product p * q for (..., 4) arrays in (i, j, k, r) order."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    x1, y1, z1, w1 = np.moveaxis(p, -1, 0)
    x2, y2, z2, w2 = np.moveaxis(q, -1, 0)
    return np.stack([
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
    ], axis=-1)


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([-1.0, -1.0, -1.0, 1.0])


def quat_to_matrix(q):
    """
    Rotation matrices for (..., 4) unit quaternions.

    Returns:
        Array of shape (..., 3, 3)
    """
    q = np.asarray(q, dtype=float)
    x, y, z, w = np.moveaxis(q, -1, 0)
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(row, axis=-1) for row in rows], axis=-2)


def quat_angle(p, q):
    """Angle (radians) of the relative rotation between p and q; sign-invariant."""
    dot = np.abs(np.sum(np.asarray(p, dtype=float) * np.asarray(q, dtype=float), axis=-1))
    return 2.0 * np.arccos(np.clip(dot, 0.0, 1.0))


def random_unit_quaternions(rng, count):
    """Uniform samples on S3 (normalized Gaussian 4-vectors)."""
    return normalize_quaternions(rng.standard_normal((count, 4)))


@dataclass(frozen=True)
class UnitQuaternion:
    """
    Rotation as a unit quaternion with components in (i, j, k, r) order.

    The constructor renormalizes, so any nonzero 4-tuple is accepted.
    """

    i: float
    j: float
    k: float
    r: float

    def __post_init__(self):
        norm = math.sqrt(self.i ** 2 + self.j ** 2 + self.k ** 2 + self.r ** 2)
        if norm == 0.0:
            raise ValueError("Zero quaternion cannot represent a rotation")
        for name in ('i', 'j', 'k', 'r'):
            object.__setattr__(self, name, float(getattr(self, name)) / norm)

    @classmethod
    def identity(cls):
        return cls(0.0, 0.0, 0.0, 1.0)

    @classmethod
    def from_array(cls, values):
        i, j, k, r = (float(v) for v in values)
        return cls(i, j, k, r)

    def as_array(self):
        return np.array([self.i, self.j, self.k, self.r])

    def as_list(self):
        return [self.i, self.j, self.k, self.r]

    def matrix(self):
        return quat_to_matrix(self.as_array())

    def canonical(self):
        """Representative of the same rotation with r >= 0."""
        return self if self.r >= 0 else UnitQuaternion(-self.i, -self.j, -self.k, -self.r)

    def compose(self, other):
        """Rotation that applies `other` first, then self."""
        return UnitQuaternion.from_array(quat_multiply(self.as_array(), other.as_array()))

    def inverse(self):
        return UnitQuaternion(-self.i, -self.j, -self.k, self.r)

    def angle_to(self, other):
        return float(quat_angle(self.as_array(), other.as_array()))


def rotate(q, v):
    """
    Rotate vectors by a quaternion.

    Args:
        q: UnitQuaternion or (4,) array; renormalized when its norm drifted by more than 1e-9
        v: (3,) or (N, 3) array

    Returns:
        Rotated vectors with the shape of v
    """
    q = q.as_array() if isinstance(q, UnitQuaternion) else np.asarray(q, dtype=float)
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
        q = q / norm
    return np.asarray(v, dtype=float) @ quat_to_matrix(q).T


def _rotation_quadratic_forms():
    # R(q)[a, b] = q^T M[a, b] q for unit q; the constant 1 of the diagonal
    # entries is written as q^T q.
    forms = np.zeros((3, 3, 4, 4))

    def add(a, b, s, t, coeff):
        forms[a, b, s, t] += coeff / 2.0
        forms[a, b, t, s] += coeff / 2.0

    x, y, z, w = 0, 1, 2, 3
    for a, signs in enumerate(([1, -1, -1], [-1, 1, -1], [-1, -1, 1])):
        for axis, sign in zip((x, y, z), signs):
            add(a, a, axis, axis, sign)
        add(a, a, w, w, 1.0)
    add(0, 1, x, y, 2.0)
    add(0, 1, z, w, -2.0)
    add(0, 2, x, z, 2.0)
    add(0, 2, y, w, 2.0)
    add(1, 0, x, y, 2.0)
    add(1, 0, z, w, 2.0)
    add(1, 2, y, z, 2.0)
    add(1, 2, x, w, -2.0)
    add(2, 0, x, z, 2.0)
    add(2, 0, y, w, -2.0)
    add(2, 1, y, z, 2.0)
    add(2, 1, x, w, 2.0)
    return forms


_ROTATION_FORMS = _rotation_quadratic_forms()


def xi_matrix(u, v):
    """
    Symmetric 4x4 matrix with q^T Xi(u, v) q = u^T (q o v) for every unit q.

    Args:
        u: (..., 3) unit vectors
        v: (..., 3) unit vectors, broadcast against u

    Returns:
        Array of shape (..., 4, 4)
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.einsum('...a,...b,abst->...st', u, v, _ROTATION_FORMS)


def mirror_upper(matrix):
    """Exactly symmetric copy built from the upper triangle of (..., n, n)."""
    matrix = np.asarray(matrix, dtype=float)
    upper = np.triu(matrix)
    return upper + np.swapaxes(np.triu(matrix, 1), -1, -2)


def sym_eig(matrix, dim=None):
    """
    Eigen-decomposition of the leading dim x dim block of a symmetric matrix.

    Returns:
        (eigenvalues ascending, eigenvectors as columns)
    """
    matrix = np.asarray(matrix, dtype=float)
    dim = matrix.shape[-1] if dim is None else dim
    block = mirror_upper(matrix[..., :dim, :dim])
    return np.linalg.eigh(block)


def batched_cholesky(b_blocks):
    """
    Batched Cholesky factors of (n, d, d) SPD blocks.

    Returns:
        (factors, valid) where rows with a pivot below 1e-12 * trace are marked invalid
    """
    count, dim = b_blocks.shape[0], b_blocks.shape[-1]
    factors = np.zeros_like(b_blocks)
    valid = np.ones(count, dtype=bool)
    try:
        factors[:] = np.linalg.cholesky(b_blocks)
    except np.linalg.LinAlgError:
        for index in range(count):
            try:
                factors[index] = np.linalg.cholesky(b_blocks[index])
            except np.linalg.LinAlgError:
                valid[index] = False
                factors[index] = np.eye(dim)
    traces = np.trace(b_blocks, axis1=-2, axis2=-1)
    pivots = np.diagonal(factors, axis1=-2, axis2=-1) ** 2
    valid &= np.all(pivots >= SINGULAR_PIVOT_RATIO * traces[:, None], axis=-1)
    factors[~valid] = np.eye(dim)
    return factors, valid


def gen_eig_batched(a_blocks, b_blocks):
    """
    Solve A v = lambda B v for a stack of small symmetric pairs.

    Reduction: B = L L^T, then eigh of L^-1 A L^-T; eigenvectors mapped back by L^-T.

    Args:
        a_blocks: (n, d, d) symmetric
        b_blocks: (n, d, d) symmetric positive definite

    Returns:
        (eigenvalues (n, d) ascending, eigenvectors (n, d, d) as columns, valid (n,) bool)
    """
    a_blocks = mirror_upper(a_blocks)
    b_blocks = mirror_upper(b_blocks)
    factors, valid = batched_cholesky(b_blocks)
    inverse = np.linalg.inv(factors)
    reduced = mirror_upper(inverse @ a_blocks @ np.swapaxes(inverse, -1, -2))
    eigenvalues, reduced_vectors = np.linalg.eigh(reduced)
    eigenvectors = np.swapaxes(inverse, -1, -2) @ reduced_vectors
    return eigenvalues, eigenvectors, valid


def gen_eig_pair(a_matrix, b_matrix, dim=None):
    """
    Generalized eigenproblem on the leading dim x dim blocks of (A, B).

    Raises:
        SingularBError: Cholesky pivot of B below 1e-12 * trace(B)
    """
    a_matrix = np.asarray(a_matrix, dtype=float)
    b_matrix = np.asarray(b_matrix, dtype=float)
    dim = a_matrix.shape[-1] if dim is None else dim
    eigenvalues, eigenvectors, valid = gen_eig_batched(
        a_matrix[None, :dim, :dim], b_matrix[None, :dim, :dim]
    )
    if not valid[0]:
        raise SingularBError(f"B block of size {dim} is not numerically positive definite")
    return eigenvalues[0], eigenvectors[0]


def f_rot(z):
    """f(z) = 2 sinh(z) / z, equal to 2 at z = 0."""
    z = np.asarray(z, dtype=float)
    small = z < TAYLOR_CUTOFF
    safe = np.where(small, 1.0, z)
    z2 = z * z
    series = 2.0 * (1.0 + z2 / 6.0 + z2 * z2 / 120.0 + z2 * z2 * z2 / 5040.0)
    with np.errstate(over='ignore'):
        direct = 2.0 * np.sinh(safe) / safe
    result = np.where(small, series, direct)
    return result if result.ndim else float(result)


def log_f_rot(z):
    """log f(z) = z + log(1 - e^-2z) - log z, finite for z up to 1e4 and beyond."""
    z = np.asarray(z, dtype=float)
    small = z < TAYLOR_CUTOFF
    safe = np.where(small, 1.0, z)
    z2 = z * z
    series = LOG_2 + np.log1p(z2 / 6.0 + z2 * z2 / 120.0 + z2 * z2 * z2 / 5040.0)
    direct = safe + np.log(-np.expm1(-2.0 * safe)) - np.log(safe)
    result = np.where(small, series, direct)
    return result if result.ndim else float(result)


def log_vmf_const(tau):
    """log C(tau) with C(tau) = tau / (4 pi sinh tau); tends to -log(4 pi) as tau -> 0."""
    result = -LOG_4PI - (np.asarray(log_f_rot(tau)) - LOG_2)
    return result if result.ndim else float(result)


def log_diff_exp(a, b):
    """log(e^a - e^b) for a >= b; -inf where a == b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    with np.errstate(divide='ignore'):
        return a + np.log(-np.expm1(np.minimum(b - a, 0.0)))


@dataclass(frozen=True)
class LogScale:
    """
    Global factor e^-Z applied to every log-weight of one problem instance.

    Multiplying all objectives and bounds by the same positive constant leaves
    every branch-and-bound comparison unchanged.
    """

    log_factor: float

    @classmethod
    def for_rotation(cls, log_weights, tau1, tau2):
        """Z = max over pairs of log D + tau1 + tau2 (the largest attainable log term)."""
        return cls(float(np.max(np.asarray(log_weights) + np.asarray(tau1) + np.asarray(tau2))))

    @classmethod
    def for_translation(cls, log_weights):
        """Z = max log D, since every Gaussian exponent is <= 0."""
        return cls(float(np.max(log_weights)))

    def apply(self, log_values):
        return np.asarray(log_values, dtype=float) - self.log_factor

    def unscale(self, value):
        """Objective value in unscaled units (may overflow to inf for huge Z)."""
        with np.errstate(over='ignore'):
            return float(value * np.exp(self.log_factor))

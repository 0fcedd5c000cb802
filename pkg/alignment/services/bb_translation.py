"""
Translational branch and bound over R3 for Gaussian mixtures of points.

For a fixed rotation R the objective is

    G(t) = sum_kk' D_kk' exp(z_kk'(t)),  z = -1/2 (t - m)^T S^-1 (t - m),
    m = mu1 - R mu2,  S = Sigma1 + R Sigma2 R^T,
    D = pi1 pi2 / sqrt((2 pi)^3 |S|)

so that the best t satisfies cloud1 ~ R cloud2 + t.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations, product

import numpy as np

from alignment.services.branch_and_bound import BranchAndBound, NodeBounds
from alignment.services.numerics import LogScale, quat_to_matrix
from alignment.services.tess_r3 import subdivide

logger = logging.getLogger(__name__)

LOG_2PI_CUBED = 3.0 * float(np.log(2.0 * np.pi))
DEGENERATE_RANGE = 1e-12
SINGULAR_DET_RATIO = 1e-12


def _box_strata():
    """(free axes, fixed axes, lo/hi choices) for the 27 faces of a box."""
    strata = []
    for size in (3, 2, 1, 0):
        for free in combinations(range(3), size):
            fixed = tuple(axis for axis in range(3) if axis not in free)
            choices = np.array(list(product([0, 1], repeat=len(fixed))), dtype=int)
            strata.append((list(free), list(fixed), choices))
    return strata


_STRATA = _box_strata()


@dataclass
class TransPairTerms:
    """
    Per-pair constants of the translational objective, flattened over (k, k').

    Args:
        offsets: (P, 3) m = mu1 - R mu2, the translation where the pair peaks
        covariances: (P, 3, 3) S
        precisions: (P, 3, 3) S^-1
        log_weights: (P,) log D with the LogScale already subtracted
        scale: LogScale applied to log_weights
    """

    offsets: np.ndarray
    covariances: np.ndarray
    precisions: np.ndarray
    log_weights: np.ndarray
    scale: LogScale

    def __len__(self):
        return len(self.log_weights)

    @cached_property
    def quadratic(self):
        """Per-pair (A, B, C) with z = t^T A t + B^T t + C; independent of the box."""
        b_vector = np.einsum('pij,pj->pi', self.precisions, self.offsets)
        c_value = -0.5 * np.sum(self.offsets * b_vector, axis=1)
        return -0.5 * self.precisions, b_vector, c_value

    @cached_property
    def stratum_inverses(self):
        """Free-block inverses of the per-pair A for every box stratum."""
        return stratum_inverses(self.quadratic[0])


def trans_pair_terms(gmm1, gmm2, rotation):
    """
    Pair constants for a fixed rotation.

    Args:
        gmm1: Source GaussMixture
        gmm2: Target GaussMixture
        rotation: UnitQuaternion or (4,) array
    """
    q = rotation.as_array() if hasattr(rotation, 'as_array') else np.asarray(rotation, dtype=float)
    matrix = quat_to_matrix(q / np.linalg.norm(q))
    first, second = np.meshgrid(np.arange(len(gmm1)), np.arange(len(gmm2)), indexing='ij')
    first = first.ravel()
    second = second.ravel()

    rotated_means = np.asarray(gmm2.means, dtype=float) @ matrix.T
    rotated_covariances = matrix @ np.asarray(gmm2.covariances, dtype=float) @ matrix.T
    offsets = np.asarray(gmm1.means, dtype=float)[first] - rotated_means[second]
    covariances = np.asarray(gmm1.covariances, dtype=float)[first] + rotated_covariances[second]
    covariances = 0.5 * (covariances + np.swapaxes(covariances, -1, -2))
    precisions = np.linalg.inv(covariances)
    precisions = 0.5 * (precisions + np.swapaxes(precisions, -1, -2))

    _, log_det = np.linalg.slogdet(covariances)
    log_weights = (
        np.log(np.asarray(gmm1.weights, dtype=float)[first])
        + np.log(np.asarray(gmm2.weights, dtype=float)[second])
        - 0.5 * (LOG_2PI_CUBED + log_det)
    )
    scale = LogScale.for_translation(log_weights)
    return TransPairTerms(
        offsets=offsets,
        covariances=covariances,
        precisions=precisions,
        log_weights=scale.apply(log_weights),
        scale=scale,
    )


def pair_exponents(t, terms):
    """z for every (translation, pair): (n, P) for t of shape (n, 3)."""
    diff = np.asarray(t, dtype=float)[:, None, :] - terms.offsets[None, :, :]
    return -0.5 * np.einsum('npi,pij,npj->np', diff, terms.precisions, diff)


def trans_objective(t, terms):
    """Scaled objective at one translation (3,) or a batch (n, 3)."""
    t = np.asarray(t, dtype=float)
    values = np.exp(terms.log_weights + pair_exponents(np.atleast_2d(t), terms)).sum(axis=1)
    return values if t.ndim == 2 else float(values[0])


def _stratum_inverse(a_free):
    """Inverses of (n, d, d) blocks; singular blocks get a pseudo-inverse."""
    dim = a_free.shape[-1]
    det = np.linalg.det(a_free)
    magnitude = np.max(np.abs(a_free), axis=(-2, -1)) ** dim
    singular = np.abs(det) <= SINGULAR_DET_RATIO * np.maximum(magnitude, np.finfo(float).tiny)
    inverse = np.empty_like(a_free)
    if (~singular).any():
        inverse[~singular] = np.linalg.inv(a_free[~singular])
    if singular.any():
        inverse[singular] = np.linalg.pinv(a_free[singular])
    return inverse


def stratum_inverses(a_matrix):
    """_stratum_inverse of the free block of (n, 3, 3) A for every stratum in _STRATA order."""
    a_matrix = np.asarray(a_matrix, dtype=float).reshape(-1, 3, 3)
    return [
        _stratum_inverse(a_matrix[:, free][:, :, free]) if free else None
        for free, _, _ in _STRATA
    ]


def max_quadratic_over_box(a_matrix, b_vector, c_value, lo, hi, inverses=None):
    """
    Exact maximum of t^T A t + B^T t + C over the box [lo, hi] for A negative semidefinite.

    The maximizer is a stationary point of the restriction to one of the 27
    strata of the box (interior, 6 faces, 12 edges, 8 vertices). Each stratum's
    stationary point is solved in closed form and kept when it lies in the box.
    Singular blocks use the minimum-norm stationary point; the remaining
    maximizers lie on lower strata, which are always enumerated.

    Args:
        a_matrix: (3, 3) or (n, 3, 3)
        b_vector: (3,) or (n, 3)
        c_value: scalar or (n,)
        lo, hi: (3,) box corners
        inverses: Optional stratum_inverses(a_matrix), reused across boxes

    Returns:
        (value, argmax) with shapes () and (3,), or (n,) and (n, 3) when batched
    """
    a_matrix = np.asarray(a_matrix, dtype=float)
    batched = a_matrix.ndim == 3
    a_matrix = a_matrix.reshape(-1, 3, 3)
    count = len(a_matrix)
    b_vector = np.asarray(b_vector, dtype=float).reshape(count, 3)
    c_value = np.broadcast_to(np.asarray(c_value, dtype=float), (count,))
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    corners = np.stack([lo, hi])
    tolerance = 1e-12 * (1.0 + np.max(np.abs(corners)))

    best_value = np.full(count, -np.inf)
    best_point = np.tile(lo, (count, 1))
    if inverses is None:
        inverses = stratum_inverses(a_matrix)
    for (free, fixed, choices), inverse in zip(_STRATA, inverses):
        for choice in choices:
            point = np.zeros((count, 3))
            if fixed:
                point[:, fixed] = corners[choice, fixed]
            inside = np.ones(count, dtype=bool)
            if free:
                coupling = a_matrix[:, free][:, :, fixed] @ point[:, fixed][:, :, None] if fixed else 0.0
                rhs = -(0.5 * b_vector[:, free][:, :, None] + coupling)
                free_point = (inverse @ rhs)[:, :, 0]
                inside = np.all(
                    (free_point >= lo[free] - tolerance) & (free_point <= hi[free] + tolerance), axis=1
                )
                point[:, free] = np.clip(free_point, lo[free], hi[free])
            value = (
                np.einsum('ni,nij,nj->n', point, a_matrix, point)
                + np.sum(b_vector * point, axis=1)
                + c_value
            )
            better = inside & (value > best_value)
            best_value = np.where(better, value, best_value)
            best_point[better] = point[better]

    if batched:
        return best_value, best_point
    return float(best_value[0]), best_point[0]


def pair_extrema_box(box, terms):
    """
    Per-pair (l, u) of z over the box.

    u is the exact concave maximum; l is attained at one of the 8 corners.
    """
    a_matrix, b_vector, c_value = terms.quadratic
    upper_z, _ = max_quadratic_over_box(
        a_matrix, b_vector, c_value, box.lo, box.hi, inverses=terms.stratum_inverses
    )
    lower_z = pair_exponents(box.corners, terms).min(axis=0)
    upper_z = np.minimum(upper_z, 0.0)
    return np.minimum(lower_z, upper_z), upper_z


def secant_coefficients(lower_z, upper_z, log_weights):
    """
    D g and D h of the secant g z + h >= e^z on [l, u].

    Pairs with u - l < 1e-12 use the constant e^u.
    """
    peak = np.exp(log_weights + upper_z)
    span = upper_z - lower_z
    degenerate = span < DEGENERATE_RANGE
    safe_span = np.where(degenerate, 1.0, span)
    weighted_g = np.where(degenerate, 0.0, peak * -np.expm1(lower_z - upper_z) / safe_span)
    weighted_h = np.where(
        degenerate,
        peak,
        peak * (upper_z * np.exp(lower_z - upper_z) - lower_z) / safe_span,
    )
    return weighted_g, weighted_h


def trans_upper_bound(box, terms, lower_z, upper_z):
    """
    U = max over the box of t^T A t + B^T t + C with
    A = -1/2 sum D g S^-1, B = sum D g S^-1 m, C = sum D (h - 1/2 g m^T S^-1 m).
    """
    weighted_g, weighted_h = secant_coefficients(lower_z, upper_z, terms.log_weights)
    _, pulled, pair_c = terms.quadratic
    a_matrix = -0.5 * np.einsum('p,pij->ij', weighted_g, terms.precisions)
    b_vector = np.einsum('p,pi->i', weighted_g, pulled)
    c_value = float(np.sum(weighted_h + weighted_g * pair_c))
    value, _ = max_quadratic_over_box(a_matrix, b_vector, c_value, box.lo, box.hi)
    return value


def trans_lower_bound(box, terms):
    """Objective at the box center; returns (L, t_hat)."""
    center = box.center
    return trans_objective(center, terms), center


def evaluate_box(box, terms):
    lower_z, upper_z = pair_extrema_box(box, terms)
    upper = trans_upper_bound(box, terms, lower_z, upper_z)
    lower, center = trans_lower_bound(box, terms)
    return NodeBounds(lower=lower, upper=upper, point=center)


def trans_bb(terms, root_box, max_depth, gap_tol=0.0, candidate_slack=1e-3,
             max_iterations=200000, executor=None, stage='translation', prune=True):
    """
    Best-first search over octree boxes for the translation maximizing the GMM objective.

    Returns:
        SearchResult; best_point is the translation with the highest lower bound
    """
    search = BranchAndBound(
        stage=stage,
        evaluate=lambda box: evaluate_box(box, terms),
        subdivide=subdivide,
        max_depth=max_depth,
        gap_tol=gap_tol,
        candidate_slack=candidate_slack,
        max_candidates=1,
        max_iterations=max_iterations,
        executor=executor,
        prune=prune,
    )
    return search.run([root_box])

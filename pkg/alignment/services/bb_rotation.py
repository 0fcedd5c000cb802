"""
Rotational branch and bound over S3 for vMF mixtures of surface normals.

The objective is the L2 inner product of the two normal densities after
rotating the second one:

    F(q) = sum_kk' D_kk' f(z_kk'(q)),   z = ||tau1 mu1 + tau2 q o mu2||,
    f(z) = 2 sinh(z) / z,                D = 2 pi pi1 pi2 C(tau1) C(tau2)

All pair quantities are flattened to P = K1 * K2 pairs and evaluated as
arrays; log-weights carry the global LogScale so values stay in range.
"""

import logging
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from alignment.exceptions import InternalBoundError
from alignment.services.branch_and_bound import BranchAndBound, NodeBounds
from alignment.services.numerics import (
    LogScale,
    batched_cholesky,
    gen_eig_batched,
    log_f_rot,
    log_vmf_const,
    quat_to_matrix,
    xi_matrix,
)
from alignment.services.tess_s3 import subdivide

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
SIGN_TOLERANCE = -1e-9
DEGENERATE_RANGE = 1e-9

# Vertex subsets used by the pair extrema (|I| <= 3) and by the upper bound (all 15).
_EXTREMA_SUBSETS = [s for size in (1, 2, 3) for s in combinations(range(4), size)]
_BOUND_SUBSETS = [s for size in (1, 2, 3, 4) for s in combinations(range(4), size)]
_BOUND_INDEX_BY_SIZE = [np.array([s for s in _BOUND_SUBSETS if len(s) == size]) for size in (1, 2, 3, 4)]


@dataclass
class RotPairTerms:
    """
    Per-pair constants of the rotational objective, flattened over (k, k').

    Args:
        log_weights: (P,) log D with the LogScale already subtracted
        tau1, tau2: (P,) concentrations of the two components of each pair
        xi: (P, 4, 4) Xi(mu1_k, mu2_k')
        mu1: (K1, 3) source means
        mu2: (K2, 3) target means
        first, second: (P,) component indices into mix1 and mix2
        scale: LogScale applied to log_weights
    """

    log_weights: np.ndarray
    tau1: np.ndarray
    tau2: np.ndarray
    xi: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    first: np.ndarray
    second: np.ndarray
    scale: LogScale

    def __len__(self):
        return len(self.log_weights)

    @property
    def tau_sum(self):
        return self.tau1 + self.tau2


@dataclass
class RotNodeBounds:
    lower_z: np.ndarray
    upper_z: np.ndarray
    lower: float
    upper: float
    center: np.ndarray


def rot_pair_terms(mix1, mix2):
    """Precompute log D, concentrations and Xi for every component pair."""
    first, second = np.meshgrid(np.arange(len(mix1)), np.arange(len(mix2)), indexing='ij')
    first = first.ravel()
    second = second.ravel()
    tau1 = np.asarray(mix1.taus, dtype=float)[first]
    tau2 = np.asarray(mix2.taus, dtype=float)[second]
    log_weights = (
        LOG_2PI
        + np.log(np.asarray(mix1.weights, dtype=float)[first])
        + np.log(np.asarray(mix2.weights, dtype=float)[second])
        + log_vmf_const(tau1)
        + log_vmf_const(tau2)
    )
    scale = LogScale.for_rotation(log_weights, tau1, tau2)
    return RotPairTerms(
        log_weights=scale.apply(log_weights),
        tau1=tau1,
        tau2=tau2,
        xi=xi_matrix(np.asarray(mix1.means)[first], np.asarray(mix2.means)[second]),
        mu1=np.asarray(mix1.means, dtype=float),
        mu2=np.asarray(mix2.means, dtype=float),
        first=first,
        second=second,
        scale=scale,
    )


def _concentration(terms, cosine):
    squared = terms.tau1 ** 2 + terms.tau2 ** 2 + 2.0 * terms.tau1 * terms.tau2 * cosine
    return np.sqrt(np.maximum(squared, 0.0))


def rot_objective(q, terms):
    """
    Scaled objective at one quaternion (4,) or a batch (n, 4).

    Invariant under q -> -q.
    """
    q = np.asarray(q, dtype=float)
    batch = np.atleast_2d(q)
    cosine = np.einsum('ni,pij,nj->np', batch, terms.xi, batch)
    z = _concentration(terms, cosine)
    values = np.exp(terms.log_weights + log_f_rot(z)).sum(axis=1)
    return values if q.ndim == 2 else float(values[0])


def _subset_inverses(rotated, subset):
    """Gram inverses of M_I for every target component; singular grams flagged invalid."""
    columns = rotated[:, list(subset), :]
    gram = columns @ np.swapaxes(columns, -1, -2)
    _, valid = batched_cholesky(gram)
    gram[~valid] = np.eye(len(subset))
    return np.linalg.inv(gram), valid


def cone_pair_extrema(node, terms):
    """
    Pair bounds from the cone spanned by the vertex-rotated target means.

    With M_i = q_i o mu2 for the four cell vertices, the max of mu^T v over
    cone(M) is found among projections of mu onto span(M_I), |I| <= 3, whose
    coefficients are all >= 0 (value +norm) or all <= 0 (value -norm). The same
    projections with the opposite sign rule give the max for -mu1.

    Rotating mu2 along a cell edge traces a small circle whenever the edge's
    relative rotation axis is not orthogonal to mu2, so q o mu2 can leave
    cone(M) by a term of second order in the cell size. These bounds are
    therefore tight but not guaranteed; see radius_pair_extrema.

    Returns:
        (lower_z (P,), upper_z (P,))
    """
    rotations = quat_to_matrix(node.vertices)
    rotated = np.einsum('vab,kb->kva', rotations, terms.mu2)
    dots = np.einsum('kva,ja->jkv', rotated, terms.mu1)

    best_plus = np.full(dots.shape[:2], -np.inf)
    best_minus = np.full(dots.shape[:2], -np.inf)
    for subset in _EXTREMA_SUBSETS:
        inverse, valid = _subset_inverses(rotated, subset)
        b = dots[:, :, list(subset)]
        alpha = np.einsum('kil,jkl->jki', inverse, b)
        norm = np.sqrt(np.maximum(np.sum(alpha * b, axis=-1), 0.0))
        nonneg = np.all(alpha >= 0.0, axis=-1)
        nonpos = np.all(alpha <= 0.0, axis=-1)
        plus = np.where(nonneg, norm, np.where(nonpos, -norm, -np.inf))
        minus = np.where(nonpos, norm, np.where(nonneg, -norm, -np.inf))
        plus[:, ~valid] = -np.inf
        minus[:, ~valid] = -np.inf
        np.maximum(best_plus, plus, out=best_plus)
        np.maximum(best_minus, minus, out=best_minus)

    j_plus = np.clip(best_plus[terms.first, terms.second], -1.0, 1.0)
    j_minus = np.clip(best_minus[terms.first, terms.second], -1.0, 1.0)
    upper_z = _concentration(terms, j_plus)
    lower_z = _concentration(terms, -j_minus)
    return lower_z, np.maximum(upper_z, lower_z)


def cell_rotation_radius(node):
    """
    Largest rotation angle between the cell center and any member rotation.

    Every member q satisfies c.q >= min_i c.q_i since |sum a_i q_i| <= sum a_i,
    and the rotation angle between c and q is 2 arccos(|c.q|).
    """
    cos_half = np.clip(np.min(np.abs(node.vertices @ node.center)), 0.0, 1.0)
    return 2.0 * float(np.arccos(cos_half))


def radius_pair_extrema(node, terms):
    """
    Pair bounds from the angular ball around the rotated center.

    Each q o mu2 lies within the cell's rotation radius rho of c o mu2, so
    the angle to mu1 lies in [theta_c - rho, theta_c + rho] clipped to [0, pi].

    Returns:
        (lower_z (P,), upper_z (P,))
    """
    radius = cell_rotation_radius(node)
    centered = terms.mu2 @ quat_to_matrix(node.center).T
    cosine = np.clip(terms.mu1 @ centered.T, -1.0, 1.0)[terms.first, terms.second]
    theta = np.arccos(cosine)
    upper_z = _concentration(terms, np.cos(np.maximum(theta - radius, 0.0)))
    lower_z = _concentration(terms, np.cos(np.minimum(theta + radius, np.pi)))
    return lower_z, np.maximum(upper_z, lower_z)


PAIR_EXTREMA = {
    'radius': radius_pair_extrema,
    'cone': cone_pair_extrema,
}


def pair_extrema(node, terms, method='radius'):
    """
    Bounds l <= z(q) <= u over the cell for every pair.

    Args:
        method: 'radius' (guaranteed) or 'cone' (tighter, not guaranteed)
    """
    try:
        extrema = PAIR_EXTREMA[method]
    except KeyError:
        raise ValueError(f"Unknown pair extrema method '{method}'; expected one of {sorted(PAIR_EXTREMA)}")
    return extrema(node, terms)


def chord_coefficients(lower_z, upper_z, log_weights, tau_sum):
    """
    D g and D h of the chord g z^2 + h >= f(z) on [l, u], assembled in log domain.

    Pairs with u - l < 1e-9 * (tau1 + tau2) use the constant bound f(u).
    """
    log_fu = log_f_rot(upper_z)
    log_fl = log_f_rot(lower_z)
    peak = np.exp(log_weights + log_fu)
    ratio = np.exp(log_fl - log_fu)
    span = upper_z ** 2 - lower_z ** 2
    degenerate = (upper_z - lower_z) < DEGENERATE_RANGE * tau_sum
    safe_span = np.where(degenerate, 1.0, span)
    weighted_g = np.where(degenerate, 0.0, peak * -np.expm1(log_fl - log_fu) / safe_span)
    weighted_h = np.where(
        degenerate, peak, peak * (upper_z ** 2 * ratio - lower_z ** 2) / safe_span
    )
    return weighted_g, weighted_h


def max_rayleigh_over_cone(a_matrix, vertices):
    """
    max q^T A q over unit q = Q alpha / ||Q alpha||, alpha >= 0.

    Each of the 15 vertex subsets contributes the generalized eigenvalues of
    ((Q^T A Q)_I, (Q^T Q)_I) whose eigenvectors have one sign.
    """
    projected = vertices @ a_matrix @ vertices.T
    gram = vertices @ vertices.T
    best = -np.inf
    for index in _BOUND_INDEX_BY_SIZE:
        a_blocks = projected[index[:, :, None], index[:, None, :]]
        b_blocks = gram[index[:, :, None], index[:, None, :]]
        eigenvalues, eigenvectors, valid = gen_eig_batched(a_blocks, b_blocks)
        scale = np.max(np.abs(eigenvectors), axis=1, keepdims=True)
        unit = eigenvectors / np.where(scale > 0, scale, 1.0)
        consistent = np.all(unit >= SIGN_TOLERANCE, axis=1) | np.all(unit <= -SIGN_TOLERANCE, axis=1)
        feasible = consistent & valid[:, None]
        if feasible.any():
            best = max(best, float(eigenvalues[feasible].max()))
    if not np.isfinite(best):
        raise InternalBoundError("No vertex subset produced a feasible rotational bound")
    return best


def rot_upper_bound(node, terms, lower_z, upper_z):
    """
    U = B + max_q q^T A q with A = sum 2 D g tau1 tau2 Xi and
    B = sum D ((tau1^2 + tau2^2) g + h).
    """
    weighted_g, weighted_h = chord_coefficients(lower_z, upper_z, terms.log_weights, terms.tau_sum)
    a_matrix = np.einsum('p,pij->ij', 2.0 * weighted_g * terms.tau1 * terms.tau2, terms.xi)
    offset = float(np.sum(weighted_g * (terms.tau1 ** 2 + terms.tau2 ** 2) + weighted_h))
    return offset + max_rayleigh_over_cone(a_matrix, node.vertices)


def rot_lower_bound(node, terms):
    """Objective at the normalized vertex sum; returns (L, q_hat)."""
    center = node.center
    return rot_objective(center, terms), center


def evaluate_node(node, terms, extrema='radius'):
    lower_z, upper_z = pair_extrema(node, terms, extrema)
    upper = rot_upper_bound(node, terms, lower_z, upper_z)
    lower, center = rot_lower_bound(node, terms)
    return RotNodeBounds(lower_z=lower_z, upper_z=upper_z, lower=lower, upper=upper, center=center)


def rot_bb(terms, roots, max_depth, gap_tol=0.0, candidate_slack=1e-3, max_candidates=8,
           max_iterations=200000, executor=None, stage='rotation', prune=True, extrema='radius'):
    """
    Best-first search over the S3 cover for rotations maximizing the vMF objective.

    Args:
        terms: RotPairTerms
        roots: Root TetraNodes (the 330 hemisphere cells)
        max_depth: Subdivision depth N of accepted candidates
        extrema: Pair extrema method, see pair_extrema

    Returns:
        SearchResult whose candidates hold quaternion centers, best lower bound first
    """

    def evaluate(node):
        bounds = evaluate_node(node, terms, extrema)
        return NodeBounds(lower=bounds.lower, upper=bounds.upper, point=bounds.center)

    search = BranchAndBound(
        stage=stage,
        evaluate=evaluate,
        subdivide=subdivide,
        max_depth=max_depth,
        gap_tol=gap_tol,
        candidate_slack=candidate_slack,
        max_candidates=max_candidates,
        max_iterations=max_iterations,
        executor=executor,
        prune=prune,
    )
    return search.run(roots)

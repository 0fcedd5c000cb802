"""
Decoupled global alignment: normals -> mixtures -> rotational BB ->
per-candidate translational BB -> best translational lower bound wins.

The returned transform maps the target cloud onto the source cloud:
source ~ q o target + t.
"""

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial

import numpy as np
from django.conf import settings
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from alignment.exceptions import EmptyCloudError, NoCandidatesError
from alignment.services import tess_s3
from alignment.services.bb_rotation import rot_bb, rot_pair_terms
from alignment.services.bb_translation import trans_bb, trans_pair_terms
from alignment.services.mixtures import (
    build_gauss_mixture,
    build_vmf_mixture,
    estimate_normals,
    point_weights,
)
from alignment.services.numerics import UnitQuaternion, quat_angle, quat_multiply, rotate
from alignment.services.tess_r3 import initial_box, trans_depth_for_tolerance, union_box

logger = logging.getLogger(__name__)

# AlignmentConfig field -> key of settings.ALIGNMENT
_SETTINGS_KEYS = {
    'rot_depth': 'ROT_DEPTH',
    'trans_depth': 'TRANS_DEPTH',
    'lambda_deg_list': 'LAMBDA_DEG',
    'lambda_x_fraction': 'LAMBDA_X_FRACTION',
    'knn_k': 'KNN_K',
    'threads': 'THREADS',
    'candidate_slack': 'CANDIDATE_SLACK',
    'max_candidates': 'MAX_CANDIDATES',
    'gap_tol': 'GAP_TOL',
    'max_iterations': 'MAX_ITERATIONS',
    'candidate_dedup_deg': 'CANDIDATE_DEDUP_DEG',
    'tau_min': 'TAU_MIN',
    'tau_max': 'TAU_MAX',
    'sigma_floor_scale': 'SIGMA_FLOOR_SCALE',
    'rot_extrema': 'ROT_EXTREMA',
}


@dataclass
class AlignmentConfig:
    """
    Tunables of one alignment run.

    Per stage either a depth or a tolerance is set; a tolerance is converted
    to a depth (the translational one needs the root box, so it is converted
    per candidate).
    """

    lambda_deg_list: tuple = (45.0, 65.0, 80.0)
    lambda_x: float = None
    lambda_x_fraction: float = 0.15
    rot_depth: int = 11
    rot_tol_deg: float = None
    trans_depth: int = 10
    trans_tol: float = None
    mw_enabled: bool = False
    union_box: bool = False
    knn_k: int = 10
    viewpoint: tuple = None
    threads: int = 4
    candidate_slack: float = 1e-3
    max_candidates: int = 8
    gap_tol: float = 0.0
    max_iterations: int = 200000
    candidate_dedup_deg: float = 0.5
    tau_min: float = 1e-2
    tau_max: float = 1e3
    sigma_floor_scale: float = 1e-3
    rot_extrema: str = 'radius'

    @classmethod
    def from_settings(cls, **overrides):
        """
        Defaults from settings.ALIGNMENT, then explicit overrides (None means unset).

        A depth override wins over a tolerance override; a tolerance given
        without a depth clears the default depth.
        """
        values = {}
        configured = getattr(settings, 'ALIGNMENT', {})
        for name, key in _SETTINGS_KEYS.items():
            if key in configured:
                values[name] = configured[key]
        if 'lambda_deg_list' in values:
            values['lambda_deg_list'] = tuple(float(v) for v in values['lambda_deg_list'])

        overrides = {name: value for name, value in overrides.items() if value is not None}
        values.update(overrides)
        for depth_name, tol_name in (('rot_depth', 'rot_tol_deg'), ('trans_depth', 'trans_tol')):
            if depth_name in overrides:
                values[tol_name] = None
            elif tol_name in overrides:
                values[depth_name] = None
        return cls(**values)

    def resolved_rot_depth(self):
        if self.rot_depth is not None:
            return self.rot_depth
        return tess_s3.rot_depth_for_tolerance(math.radians(self.rot_tol_deg))

    def resolved_trans_depth(self, gamma0):
        if self.trans_depth is not None:
            return self.trans_depth
        return trans_depth_for_tolerance(self.trans_tol, gamma0)


@dataclass
class CandidateDiagnostics:
    """One rotation hypothesis and the translational search it received."""

    index: int
    q_ijkr: list
    origin: str
    lambda_deg: float
    rot_lower: float
    rot_upper: float
    rot_log_scale: float
    t: list = None
    trans_lower: float = None
    trans_upper: float = None
    trans_log_lower: float = None
    trans_depth: int = None
    trans_iterations: int = None
    root_box: dict = None


@dataclass
class AlignmentResult:
    rotation: UnitQuaternion
    translation: np.ndarray
    rot_lower: float
    rot_upper: float
    trans_lower: float
    trans_upper: float
    rot_depth: int
    trans_depth: int
    lambda_x: float
    root_box: dict
    rmse: float
    candidates: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    timings_ms: dict = field(default_factory=dict)
    selected_index: int = 0

    @property
    def q_ijkr(self):
        return self.rotation.as_list()


def octahedral_group():
    """The 24 rotations of the cube as (24, 4) quaternions in (i, j, k, r) order."""
    quaternions = Rotation.create_group('O').as_quat()
    return np.where(quaternions[:, 3:4] < 0, -quaternions, quaternions)


def mw_expand(q):
    """q composed with each of the 24 Manhattan-World rotations (applied first)."""
    base = q.as_array() if isinstance(q, UnitQuaternion) else np.asarray(q, dtype=float)
    expanded = quat_multiply(base[None, :], octahedral_group())
    return [UnitQuaternion.from_array(row) for row in expanded]


def apply_transform(q, t, points):
    """x -> q o x + t for (N, 3) points."""
    return rotate(q, points) + np.asarray(t, dtype=float)


def point_rmse(source_points, moved_points):
    """Root mean squared nearest-neighbour distance of moved points to the source cloud."""
    distances, _ = cKDTree(source_points).query(moved_points, k=1)
    return float(np.sqrt(np.mean(distances ** 2)))


def prepare_cloud(cloud, config, label):
    """Fill in normals and area weights where the input lacks them."""
    if len(cloud) == 0:
        raise EmptyCloudError(f"{label} cloud has no points")
    if cloud.normals is None:
        normals, degenerate = estimate_normals(cloud.points, k=config.knn_k, viewpoint=config.viewpoint)
        cloud = replace(cloud, normals=normals, degenerate=degenerate)
    else:
        norms = np.linalg.norm(cloud.normals, axis=1, keepdims=True)
        cloud = replace(cloud, normals=cloud.normals / np.where(norms > 0, norms, 1.0))
    if cloud.weights is None:
        weights = point_weights(cloud.points)
        if weights.sum() <= 0:
            logger.warning(f"{label} cloud has only duplicate neighbourhoods; using uniform weights")
            weights = np.ones(len(cloud))
        cloud = replace(cloud, weights=weights)
    return cloud


def deduplicate_rotations(candidates, min_angle_deg):
    """Keep the first of any candidates closer than min_angle_deg to an earlier one."""
    kept = []
    threshold = math.radians(min_angle_deg)
    for candidate in candidates:
        q = np.asarray(candidate['q'])
        if all(quat_angle(q, np.asarray(other['q'])) >= threshold for other in kept):
            kept.append(candidate)
    return kept


def _child_executor(threads):
    return ThreadPoolExecutor(max_workers=threads) if threads > 1 else None


def _run_searches(search, arguments, threads):
    """
    Run independent searches and return their results in argument order.

    With several searches and threads > 1 each search gets its own worker
    process; a lone search keeps the threads for its child bound evaluations.
    """
    if threads > 1 and len(arguments) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(arguments))) as pool:
            return list(pool.map(search, arguments))
    return [search(argument, threads=threads) for argument in arguments]


def _rotation_search(lambda_deg, source, target, roots, rot_depth, config, threads=1):
    """vMF mixtures at one DP-vMF-means scale and the rotational search over them."""
    mix1 = build_vmf_mixture(source, lambda_deg, config.tau_min, config.tau_max)
    mix2 = build_vmf_mixture(target, lambda_deg, config.tau_min, config.tau_max)
    logger.info(f"lambda={lambda_deg:g} deg: vMF mixtures with {len(mix1)} and {len(mix2)} components")
    terms = rot_pair_terms(mix1, mix2)
    executor = _child_executor(threads)
    try:
        search = rot_bb(
            terms,
            roots,
            max_depth=rot_depth,
            gap_tol=config.gap_tol,
            candidate_slack=config.candidate_slack,
            max_candidates=config.max_candidates,
            max_iterations=config.max_iterations,
            executor=executor,
            stage=f'rotation[lambda={lambda_deg:g}]',
            extrema=config.rot_extrema,
        )
    finally:
        if executor is not None:
            executor.shutdown()
    return terms.scale.log_factor, search


def _rotation_stage(source, target, config, tessellation, rot_depth, trace):
    search = partial(
        _rotation_search,
        source=source,
        target=target,
        roots=tessellation.hemisphere_cells,
        rot_depth=rot_depth,
        config=config,
    )
    lambdas = [float(lambda_deg) for lambda_deg in config.lambda_deg_list]
    candidates = []
    for lambda_deg, (log_scale, result) in zip(lambdas, _run_searches(search, lambdas, config.threads)):
        trace.extend(result.trace)
        for node in result.candidates:
            q = np.asarray(node.point, dtype=float)
            candidates.append({
                'q': q if q[3] >= 0 else -q,
                'origin': 'rotation_bb',
                'lambda_deg': lambda_deg,
                'rot_lower': float(node.lower),
                'rot_upper': float(node.upper),
                'rot_log_scale': log_scale,
            })
    return candidates


def _expand_manhattan(candidates):
    identity = np.isclose(octahedral_group()[:, 3], 1.0)
    expanded = []
    for candidate in candidates:
        for q, is_identity in zip(mw_expand(candidate['q']), identity):
            origin = candidate['origin'] if is_identity else 'manhattan_world'
            expanded.append({**candidate, 'q': q.canonical().as_array(), 'origin': origin})
    return expanded


def _translation_search(indexed_candidate, source, target, gmm1, gmm2, config, threads=1):
    """Translational search for one candidate rotation; returns its diagnostics and trace."""
    index, candidate = indexed_candidate
    q = UnitQuaternion.from_array(candidate['q'])
    rotated = rotate(q, target.points)
    box = union_box(source.points, rotated) if config.union_box else initial_box(source.points, rotated)
    depth = config.resolved_trans_depth(box.diagonal)
    terms = trans_pair_terms(gmm1, gmm2, q)
    executor = _child_executor(threads)
    try:
        search = trans_bb(
            terms,
            box,
            max_depth=depth,
            gap_tol=config.gap_tol,
            candidate_slack=config.candidate_slack,
            max_iterations=config.max_iterations,
            executor=executor,
            stage=f'translation[candidate={index}]',
        )
    finally:
        if executor is not None:
            executor.shutdown()
    log_lower = math.log(search.best_lower) + terms.scale.log_factor if search.best_lower > 0 else -math.inf
    diagnostics = CandidateDiagnostics(
        index=index,
        q_ijkr=q.as_list(),
        origin=candidate['origin'],
        lambda_deg=candidate['lambda_deg'],
        rot_lower=candidate['rot_lower'],
        rot_upper=candidate['rot_upper'],
        rot_log_scale=candidate['rot_log_scale'],
        t=[float(v) for v in search.best_point],
        trans_lower=terms.scale.unscale(search.best_lower),
        trans_upper=terms.scale.unscale(search.best_upper),
        trans_log_lower=log_lower,
        trans_depth=depth,
        trans_iterations=search.iterations,
        root_box=box.as_dict(),
    )
    return diagnostics, search.trace


def _translation_stage(source, target, candidates, gmm1, gmm2, config, trace):
    search = partial(
        _translation_search, source=source, target=target, gmm1=gmm1, gmm2=gmm2, config=config,
    )
    diagnostics = []
    for entry, entry_trace in _run_searches(search, list(enumerate(candidates)), config.threads):
        diagnostics.append(entry)
        trace.extend(entry_trace)
    return diagnostics


def select_candidate(diagnostics):
    """Index of the highest translational lower bound; earliest index on ties."""
    best = 0
    for entry in diagnostics[1:]:
        if entry.trans_log_lower > diagnostics[best].trans_log_lower:
            best = entry.index
    return best


def align(cloud1, cloud2, config=None, tessellation=None):
    """
    Globally align cloud2 (target) onto cloud1 (source).

    Args:
        cloud1: Source WeightedCloud
        cloud2: Target WeightedCloud
        config: AlignmentConfig (defaults from settings)
        tessellation: Prebuilt 600-cell; loaded from settings.TESSELLATION_CACHE when omitted

    Returns:
        AlignmentResult with source ~ q o target + t

    Raises:
        EmptyCloudError: Either cloud is empty
        NoCandidatesError: Rotational search produced no candidate
    """
    config = config or AlignmentConfig.from_settings()
    timings = {}
    started = time.perf_counter()

    def lap(name, since):
        now = time.perf_counter()
        timings[name] = (now - since) * 1000.0
        return now

    if tessellation is None:
        tessellation = tess_s3.load_or_build(getattr(settings, 'TESSELLATION_CACHE', None))
    mark = lap('tessellation', started)

    source = prepare_cloud(cloud1, config, 'Source')
    target = prepare_cloud(cloud2, config, 'Target')
    mark = lap('preprocess', mark)

    rot_depth = config.resolved_rot_depth()
    trace = []
    candidates = _rotation_stage(source, target, config, tessellation, rot_depth, trace)
    if not candidates:
        raise NoCandidatesError("Rotational search returned no candidate rotation")
    candidates = deduplicate_rotations(candidates, config.candidate_dedup_deg)
    if config.mw_enabled:
        candidates = deduplicate_rotations(_expand_manhattan(candidates), config.candidate_dedup_deg)
    logger.info(f"{len(candidates)} candidate rotation(s) after de-duplication")
    mark = lap('rotation', mark)

    identity_box = initial_box(source.points, target.points)
    sigma_floor_sq = (config.sigma_floor_scale * identity_box.diagonal) ** 2
    lo, hi = source.points.min(axis=0), source.points.max(axis=0)
    lambda_x = config.lambda_x or config.lambda_x_fraction * float(np.linalg.norm(hi - lo))
    gmm1 = build_gauss_mixture(source, lambda_x, sigma_floor_sq)
    gmm2 = build_gauss_mixture(target, lambda_x, sigma_floor_sq)
    logger.info(f"lambda_x={lambda_x:.6g}: Gaussian mixtures with {len(gmm1)} and {len(gmm2)} components")

    diagnostics = _translation_stage(source, target, candidates, gmm1, gmm2, config, trace)
    mark = lap('translation', mark)

    selected = select_candidate(diagnostics)
    winner = diagnostics[selected]
    rotation = UnitQuaternion.from_array(winner.q_ijkr)
    translation = np.array(winner.t)
    rmse = point_rmse(source.points, apply_transform(rotation, translation, target.points))
    lap('total', started)

    logger.info(
        f"Selected candidate {selected} of {len(diagnostics)}: q={rotation.as_list()} "
        f"t={translation.tolist()} rmse={rmse:.6g}"
    )
    return AlignmentResult(
        rotation=rotation,
        translation=translation,
        rot_lower=winner.rot_lower,
        rot_upper=winner.rot_upper,
        trans_lower=winner.trans_lower,
        trans_upper=winner.trans_upper,
        rot_depth=rot_depth,
        trans_depth=winner.trans_depth,
        lambda_x=lambda_x,
        root_box=winner.root_box,
        rmse=rmse,
        candidates=diagnostics,
        trace=trace,
        timings_ms=timings,
        selected_index=selected,
    )

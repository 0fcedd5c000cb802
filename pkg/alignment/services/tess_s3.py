"""
600-cell cover of the rotation hemisphere of S3 and its refinement.

A cell ("projected tetrahedron") is the set of unit quaternions that are
nonnegative combinations of its four vertices. The 330 cells touching the
upper hemisphere (r > 0) cover every rotation; subdividing a cell into eight
children keeps the cover exact while shrinking the cells.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import permutations, product
from pathlib import Path

import numpy as np

from alignment.exceptions import (
    CloudIOError,
    ConstructionInvariantViolated,
    DegenerateCellError,
)
from alignment.services.numerics import normalize_quaternions

logger = logging.getLogger(__name__)

GOLDEN_RATIO = 0.5 * (1.0 + math.sqrt(5.0))
COS_36 = math.cos(math.radians(36.0))
GAMMA_0 = COS_36

EDGE_DOT_TOLERANCE = 1e-9
CONTAINS_TOLERANCE = 1e-9
HEMISPHERE_TOLERANCE = 1e-12
MAX_CONDITION_NUMBER = 1e12

EXPECTED_COUNTS = (120, 600, 330)

CACHE_MAGIC = b'S3TESS01'

# Index layout of a cell during subdivision: 0-3 are the vertices, 4-9 the
# normalized edge midpoints m01, m02, m03, m12, m13, m23.
_EDGE_PAIRS = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
_CORNER_CHILDREN = np.array([(0, 4, 5, 6), (1, 4, 7, 8), (2, 5, 7, 9), (3, 6, 8, 9)])
# For each internal edge, the four interior children wrapped around it.
_INTERNAL_EDGES = np.array([(4, 9), (5, 8), (6, 7)])
_INTERIOR_CHILDREN = np.array([
    [(4, 9, 5, 6), (4, 9, 6, 8), (4, 9, 8, 7), (4, 9, 7, 5)],
    [(5, 8, 4, 6), (5, 8, 6, 9), (5, 8, 9, 7), (5, 8, 7, 4)],
    [(6, 7, 4, 5), (6, 7, 5, 9), (6, 7, 9, 8), (6, 7, 8, 4)],
])
_PAIR_ROWS, _PAIR_COLS = np.triu_indices(4, k=1)


def pairwise_vertex_dots(vertices):
    """Six pairwise dot products of each cell in a (..., 4, 4) stack."""
    gram = vertices @ np.swapaxes(vertices, -1, -2)
    return gram[..., _PAIR_ROWS, _PAIR_COLS]


@dataclass(frozen=True, eq=False)
class TetraNode:
    """
    One projected tetrahedron of the S3 cover.

    Args:
        vertices: (4, 4) array, one unit quaternion per row in (i, j, k, r) order
        depth: Number of subdivisions from a 600-cell root cell
    """

    vertices: np.ndarray
    depth: int = 0

    @cached_property
    def gamma(self):
        """Minimum pairwise vertex dot product."""
        return float(pairwise_vertex_dots(self.vertices).min())

    @cached_property
    def max_dot(self):
        return float(pairwise_vertex_dots(self.vertices).max())

    @cached_property
    def center(self):
        """Normalized vertex sum; strictly inside the cell."""
        total = self.vertices.sum(axis=0)
        return total / np.linalg.norm(total)

    @cached_property
    def basis_inverse(self):
        basis = self.vertices.T
        if np.linalg.cond(basis) > MAX_CONDITION_NUMBER:
            raise DegenerateCellError(f"Cell at depth {self.depth} has a rank-deficient vertex matrix")
        return np.linalg.inv(basis)


def subdivide_batch(vertices):
    """
    Split a stack of cells into eight children each.

    The six edge midpoints are projected back onto S3. Of the three internal
    edges of the midpoint octahedron, the one whose endpoints have the largest
    dot product is used to split it.

    Args:
        vertices: (n, 4, 4) cell vertices

    Returns:
        (n, 8, 4, 4) children: four corner cells then four interior cells
    """
    vertices = np.asarray(vertices, dtype=float)
    midpoints = normalize_quaternions(
        vertices[:, _EDGE_PAIRS[:, 0]] + vertices[:, _EDGE_PAIRS[:, 1]]
    )
    points = np.concatenate([vertices, midpoints], axis=1)
    edge_dots = np.sum(
        points[:, _INTERNAL_EDGES[:, 0]] * points[:, _INTERNAL_EDGES[:, 1]], axis=-1
    )
    choice = np.argmax(edge_dots, axis=1)
    layout = np.concatenate(
        [np.broadcast_to(_CORNER_CHILDREN, (len(vertices), 4, 4)), _INTERIOR_CHILDREN[choice]],
        axis=1,
    )
    rows = np.arange(len(vertices))[:, None, None]
    return points[rows, layout]


def subdivide(node):
    """Eight children of a cell at depth + 1."""
    children = subdivide_batch(node.vertices[None])[0]
    return [TetraNode(vertices=child, depth=node.depth + 1) for child in children]


def _in_cone(basis_inverse, quaternions):
    """(cells, points) mask of nonnegative barycentric coordinates."""
    coords = np.einsum('cij,pj->cpi', basis_inverse, quaternions)
    return np.all(coords >= -CONTAINS_TOLERANCE, axis=-1)


def contains(node, q, both_signs=False):
    """
    Whether a rotation lies in the cell.

    q is canonicalized to the representative with r >= 0. When r is zero
    (within 1e-12) both signs are tested; both_signs=True always tests both.

    Raises:
        DegenerateCellError: Vertex matrix is numerically singular
    """
    q = np.asarray(q.as_array() if hasattr(q, 'as_array') else q, dtype=float)
    if q[3] < 0:
        q = -q
    candidates = [q]
    if both_signs or abs(q[3]) <= HEMISPHERE_TOLERANCE:
        candidates.append(-q)
    return bool(_in_cone(node.basis_inverse[None], np.array(candidates)).any())


def rot_depth_for_tolerance(eps_rad):
    """
    Refinement depth that guarantees a rotational tolerance of eps_rad.

    N = max(0, ceil(log2((1/gamma0 - 1) / (1/cos(eps/2) - 1)))) with gamma0 = cos 36 deg.
    """
    if not 0.0 < eps_rad < math.pi:
        raise ValueError(f"Rotational tolerance must lie in (0, pi), got {eps_rad}")
    ratio = (1.0 / GAMMA_0 - 1.0) / (1.0 / math.cos(eps_rad / 2.0) - 1.0)
    return max(0, math.ceil(math.log2(ratio) - 1e-9))


def _600cell_vertices():
    vertices = [np.array(list(product([-0.5, 0.5], repeat=4)))]
    vertices.append(np.eye(4))
    vertices.append(-np.eye(4))

    perms = np.array(list(permutations(range(4))))
    perm_signs = np.array([np.linalg.det(np.eye(4)[p]) for p in perms])
    even_perms = perms[perm_signs > 0]

    base = 0.5 * np.array([GOLDEN_RATIO, 1.0, 1.0 / GOLDEN_RATIO, 0.0])
    # The zero entry carries no sign, so only the first three are flipped.
    signs = np.array(list(product([-1.0, 1.0], repeat=3)))
    signs = np.concatenate([signs, np.ones((len(signs), 1))], axis=1)
    for perm in even_perms:
        vertices.append((signs * base)[:, perm])

    return normalize_quaternions(np.concatenate(vertices))


def _600cell_cells(vertices):
    """All 4-cliques of the cos 36 deg adjacency graph, sorted."""
    gram = vertices @ vertices.T
    adjacent = np.abs(gram - COS_36) <= EDGE_DOT_TOLERANCE
    neighbors = [set(np.flatnonzero(row)) for row in adjacent]
    cells = []
    for a in range(len(vertices)):
        higher_a = sorted(n for n in neighbors[a] if n > a)
        for b in higher_a:
            higher_b = [n for n in higher_a if n > b and n in neighbors[b]]
            for c in higher_b:
                for d in higher_b:
                    if d > c and d in neighbors[c]:
                        cells.append((a, b, c, d))
    return np.array(cells, dtype=np.int64)


def _hemisphere_mask(vertices, cells):
    return np.any(vertices[cells][..., 3] > HEMISPHERE_TOLERANCE, axis=1)


@dataclass
class Tessellation:
    """
    The 600-cell and its 330 upper-hemisphere cells.

    Args:
        vertices: (120, 4) unit quaternions
        cells: (600, 4) vertex indices
    """

    vertices: np.ndarray
    cells: np.ndarray
    hemisphere_cells: list = field(init=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.cells = np.asarray(self.cells, dtype=np.int64)
        mask = _hemisphere_mask(self.vertices, self.cells)
        self.hemisphere_cells = [
            TetraNode(vertices=self.vertices[cell].copy(), depth=0) for cell in self.cells[mask]
        ]
        self.validate()

    def validate(self):
        """
        Raises:
            ConstructionInvariantViolated: Counts differ from (120, 600, 330) or a cell edge is not 36 deg
        """
        counts = (len(self.vertices), len(self.cells), len(self.hemisphere_cells))
        if counts != EXPECTED_COUNTS:
            raise ConstructionInvariantViolated(
                f"600-cell counts (vertices, cells, hemisphere cells) = {counts}, expected {EXPECTED_COUNTS}"
            )
        if np.max(np.abs(np.linalg.norm(self.vertices, axis=1) - 1.0)) > 1e-12:
            raise ConstructionInvariantViolated("600-cell vertices are not unit quaternions")
        dots = pairwise_vertex_dots(self.vertices[self.cells])
        if np.max(np.abs(dots - COS_36)) > EDGE_DOT_TOLERANCE:
            raise ConstructionInvariantViolated("600-cell cell edges are not all 36 degrees")

    @cached_property
    def hemisphere_vertices(self):
        """(330, 4, 4) vertex stack of the hemisphere cells."""
        return np.stack([node.vertices for node in self.hemisphere_cells])

    def coverage_counts(self, quaternions, cells=None, chunk_size=2000):
        """
        Number of cells that contain each rotation (q or -q).

        Args:
            quaternions: (n, 4) unit quaternions
            cells: Optional (c, 4, 4) vertex stack; defaults to the hemisphere cells

        Returns:
            (n,) integer counts
        """
        stack = self.hemisphere_vertices if cells is None else np.asarray(cells, dtype=float)
        inverses = np.linalg.inv(np.swapaxes(stack, -1, -2))
        quaternions = np.asarray(quaternions, dtype=float)
        counts = np.zeros(len(quaternions), dtype=np.int64)
        for start in range(0, len(quaternions), chunk_size):
            chunk = quaternions[start:start + chunk_size]
            hits = _in_cone(inverses, chunk) | _in_cone(inverses, -chunk)
            counts[start:start + chunk_size] = hits.sum(axis=0)
        return counts

    def save(self, path):
        """Write the versioned little-endian cache: magic, 120x4 float64, 600x4 uint16."""
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'wb') as handle:
                handle.write(CACHE_MAGIC)
                handle.write(self.vertices.astype('<f8').tobytes())
                handle.write(self.cells.astype('<u2').tobytes())
        except OSError as e:
            raise CloudIOError(f"Could not write tessellation cache {path}: {e}") from e
        logger.info(f"Wrote 600-cell cache to {path}")

    @classmethod
    def load(cls, path):
        path = Path(path)
        vertex_bytes = 120 * 4 * 8
        cell_bytes = 600 * 4 * 2
        try:
            payload = path.read_bytes()
        except OSError as e:
            raise CloudIOError(f"Could not read tessellation cache {path}: {e}") from e
        if payload[:len(CACHE_MAGIC)] != CACHE_MAGIC:
            raise ConstructionInvariantViolated(f"{path} is not an S3TESS01 tessellation cache")
        if len(payload) != len(CACHE_MAGIC) + vertex_bytes + cell_bytes:
            raise ConstructionInvariantViolated(f"{path} has {len(payload)} bytes, expected {len(CACHE_MAGIC) + vertex_bytes + cell_bytes}")
        offset = len(CACHE_MAGIC)
        vertices = np.frombuffer(payload, dtype='<f8', count=480, offset=offset).reshape(120, 4)
        cells = np.frombuffer(payload, dtype='<u2', count=2400, offset=offset + vertex_bytes).reshape(600, 4)
        return cls(vertices=vertices.astype(float), cells=cells.astype(np.int64))


def generate_600cell():
    """
    Build the 600-cell cover from scratch.

    Raises:
        ConstructionInvariantViolated: Counts differ from (120, 600, 330)
    """
    vertices = _600cell_vertices()
    cells = _600cell_cells(vertices)
    tessellation = Tessellation(vertices=vertices, cells=cells)
    logger.info(
        f"Generated 600-cell: {len(tessellation.vertices)} vertices, "
        f"{len(tessellation.cells)} cells, {len(tessellation.hemisphere_cells)} hemisphere cells"
    )
    return tessellation


def load_or_build(path=None):
    """
    Load the cached tessellation, building and caching it when missing.

    A corrupt cache is rebuilt and overwritten.
    """
    if path is None:
        return generate_600cell()
    path = Path(path)
    if path.exists():
        try:
            return Tessellation.load(path)
        except ConstructionInvariantViolated as e:
            logger.warning(f"Ignoring tessellation cache: {e}")
    tessellation = generate_600cell()
    try:
        tessellation.save(path)
    except CloudIOError as e:
        logger.warning(f"Tessellation cache not written: {e}")
    return tessellation


def sample_hemisphere(rng, count):
    """Uniform rotations as unit quaternions with r >= 0."""
    quaternions = normalize_quaternions(rng.standard_normal((count, 4)))
    return np.where(quaternions[:, 3:4] < 0, -quaternions, quaternions)


@dataclass
class CoverReport:
    samples: int
    covered_fraction: float
    double_covered_fraction: float
    max_multiplicity: int


@dataclass
class ShrinkageLevel:
    depth: int
    cells: int
    min_gamma: float
    max_dot: float
    shrinkage_violations: int
    min_shrinkage_margin: float
    conjecture_violations: int


def expected_double_cover_fraction():
    """
    Fraction of rotations covered by two hemisphere cells.

    All 600 cells have equal measure, so 330 cells spread over a hemisphere
    worth 300 cells cover (330 - 300) / 300 of it twice.
    """
    total, hemisphere = EXPECTED_COUNTS[1], EXPECTED_COUNTS[2]
    return (hemisphere - total / 2) / (total / 2)


def audit_cover(tessellation, rng, samples=100000, cells=None):
    """Coverage multiplicity of uniformly sampled rotations."""
    quaternions = sample_hemisphere(rng, samples)
    counts = tessellation.coverage_counts(quaternions, cells=cells)
    report = CoverReport(
        samples=samples,
        covered_fraction=float(np.mean(counts >= 1)),
        double_covered_fraction=float(np.mean(counts >= 2)),
        max_multiplicity=int(counts.max()),
    )
    logger.info(
        f"Cover audit over {samples} rotations: covered={report.covered_fraction:.5f} "
        f"double={report.double_covered_fraction:.5f} max multiplicity={report.max_multiplicity}"
    )
    return report


def audit_shrinkage(tessellation, depth=3):
    """
    Exhaustively subdivide every hemisphere cell and check cell shrinkage.

    Every child must satisfy gamma_child >= 2 gamma_parent / (1 + gamma_parent)
    (within 1e-12). The max-dot recursion Gamma_child <= sqrt((1 + Gamma_parent) / 2)
    is only counted and logged, never enforced.

    Returns:
        List of ShrinkageLevel, one per depth 1..depth
    """
    levels = []
    parents = tessellation.hemisphere_vertices
    for level in range(1, depth + 1):
        parent_dots = pairwise_vertex_dots(parents)
        parent_gamma = parent_dots.min(axis=-1)
        parent_max = parent_dots.max(axis=-1)
        children = subdivide_batch(parents)
        child_dots = pairwise_vertex_dots(children)
        child_gamma = child_dots.min(axis=-1)
        child_max = child_dots.max(axis=-1)

        shrinkage_bound = (2.0 * parent_gamma / (1.0 + parent_gamma))[:, None]
        margin = child_gamma - shrinkage_bound
        conjecture_bound = np.sqrt((1.0 + parent_max) / 2.0)[:, None]
        conjecture_violations = int(np.sum(child_max > conjecture_bound + 1e-9))

        entry = ShrinkageLevel(
            depth=level,
            cells=int(child_gamma.size),
            min_gamma=float(child_gamma.min()),
            max_dot=float(child_max.max()),
            shrinkage_violations=int(np.sum(margin < -1e-12)),
            min_shrinkage_margin=float(margin.min()),
            conjecture_violations=conjecture_violations,
        )
        if conjecture_violations:
            logger.warning(f"Depth {level}: {conjecture_violations} cells exceed the max-dot recursion")
        logger.info(
            f"Depth {level}: {entry.cells} cells, min gamma {entry.min_gamma:.9f}, "
            f"shrinkage violations {entry.shrinkage_violations}"
        )
        levels.append(entry)
        parents = children.reshape(-1, 4, 4)
    return levels

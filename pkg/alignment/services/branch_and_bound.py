"""
Best-first branch-and-bound driver shared by the rotation and translation stages.

A stage plugs in two callables: `evaluate(region) -> NodeBounds` and
`subdivide(region) -> children`. The driver owns the priority queue, the
incumbent, pruning and the per-pop trace. Child bounds of a popped node are
evaluated through an optional executor; results are consumed in child order,
so the explored sequence is identical for any thread count.
"""

import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)

TRACE_FIELDS = ('iter', 'stage', 'depth', 'nodes_active', 'best_L', 'best_U', 'gap')


@dataclass
class NodeBounds:
    """Bounds of one region: lower is attained at `point`, upper covers the whole region."""

    lower: float
    upper: float
    point: object


@dataclass
class SearchNode:
    region: object
    depth: int
    lower: float
    upper: float
    point: object


@dataclass
class TraceRecord:
    iter: int
    stage: str
    depth: int
    nodes_active: int
    best_L: float
    best_U: float
    gap: float

    def as_row(self):
        return [getattr(self, name) for name in TRACE_FIELDS]


@dataclass
class SearchResult:
    """
    Outcome of one branch-and-bound run.

    candidates are finished max-depth nodes within the slack of best_lower,
    sorted by lower bound descending (never empty).
    """

    candidates: list
    best_lower: float
    best_upper: float
    best_point: object
    iterations: int
    stop_reason: str
    trace: list = field(default_factory=list)


class BranchAndBound:
    """
    Args:
        stage: Label written into every trace record
        evaluate: Callable region -> NodeBounds
        subdivide: Callable region -> list of child regions
        max_depth: Nodes at this depth are not refined further
        gap_tol: Stop once best_U - best_L <= gap_tol * |best_U| (0 disables)
        candidate_slack: Relative slack on best_L for pruning and candidate survival
        max_candidates: Stop after this many max-depth nodes have been popped
        max_iterations: Hard cap on pops
        executor: Optional concurrent.futures executor for child bound evaluation
        prune: Discard nodes whose upper bound is below the threshold
    """

    def __init__(self, stage, evaluate, subdivide, max_depth, gap_tol=0.0,
                 candidate_slack=1e-3, max_candidates=1, max_iterations=200000,
                 executor=None, prune=True):
        self.stage = stage
        self.evaluate = evaluate
        self.subdivide = subdivide
        self.max_depth = max_depth
        self.gap_tol = gap_tol
        self.candidate_slack = candidate_slack
        self.max_candidates = max_candidates
        self.max_iterations = max_iterations
        self.executor = executor
        self.prune = prune

        self._heap = []
        self._counter = itertools.count()
        self._finished = []
        self._best = None

    def _evaluate_all(self, regions):
        if self.executor is None:
            return [self.evaluate(region) for region in regions]
        return list(self.executor.map(self.evaluate, regions))

    def _threshold(self):
        best_lower = self._best.lower
        return best_lower - self.candidate_slack * abs(best_lower)

    def _push(self, node):
        # Highest upper bound first, deeper node on ties, then insertion order.
        heapq.heappush(self._heap, (-node.upper, -node.depth, next(self._counter), node))

    def _accept(self, regions, depth, parent_upper=math.inf):
        bounds = self._evaluate_all(regions)
        nodes = []
        for region, result in zip(regions, bounds):
            upper = min(result.upper, parent_upper)
            node = SearchNode(
                region=region,
                depth=depth,
                lower=result.lower,
                upper=max(upper, result.lower),
                point=result.point,
            )
            if self._best is None or node.lower > self._best.lower:
                self._best = node
            nodes.append(node)
        threshold = self._threshold()
        for node in nodes:
            if not self.prune or node.upper >= threshold:
                self._push(node)

    def _global_upper(self):
        upper = -math.inf
        if self._heap:
            upper = -self._heap[0][0]
        if self._finished:
            upper = max(upper, max(node.upper for node in self._finished))
        return max(upper, self._best.lower)

    def run(self, roots):
        """
        Search from the given root regions.

        Returns:
            SearchResult
        """
        self._accept(list(roots), depth=0)
        trace = []
        iteration = 0
        stop_reason = 'exhausted'
        record_debug = logger.isEnabledFor(logging.DEBUG)

        while self._heap:
            if iteration >= self.max_iterations:
                stop_reason = 'max_iterations'
                logger.warning(f"{self.stage}: stopped at the iteration cap ({self.max_iterations})")
                break
            if self.prune and -self._heap[0][0] < self._threshold():
                stop_reason = 'bounds_converged'
                break

            _, _, _, node = heapq.heappop(self._heap)
            iteration += 1
            if node.depth >= self.max_depth:
                self._finished.append(node)
            else:
                self._accept(self.subdivide(node.region), node.depth + 1, parent_upper=node.upper)

            best_upper = self._global_upper()
            best_lower = self._best.lower
            record = TraceRecord(
                iter=iteration,
                stage=self.stage,
                depth=node.depth,
                nodes_active=len(self._heap),
                best_L=best_lower,
                best_U=best_upper,
                gap=best_upper - best_lower,
            )
            trace.append(record)
            if record_debug:
                logger.debug('bb pop', extra=vars(record).copy())

            if len(self._finished) >= self.max_candidates:
                stop_reason = 'max_candidates'
                break
            if self.gap_tol > 0 and record.gap <= self.gap_tol * abs(best_upper):
                stop_reason = 'gap_tolerance'
                break

        threshold = self._threshold()
        candidates = sorted(
            (node for node in self._finished if node.upper >= threshold),
            key=lambda node: -node.lower,
        )
        if not candidates:
            candidates = [self._best]
        candidates = candidates[:max(self.max_candidates, 1)]

        result = SearchResult(
            candidates=candidates,
            best_lower=self._best.lower,
            best_upper=self._global_upper(),
            best_point=self._best.point,
            iterations=iteration,
            stop_reason=stop_reason,
            trace=trace,
        )
        logger.info(
            f"{self.stage}: {iteration} pops, stop={stop_reason}, "
            f"L={result.best_lower:.6g} U={result.best_upper:.6g}, {len(candidates)} candidate(s)"
        )
        return result

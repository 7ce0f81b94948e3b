"""Best-bound branch-and-bound over the Duality-based single-level model.

Bounding uses the concave-quadratic relaxation (a convex QP per node);
branching resolves fractional leader binaries first, then the
complementarity pair with the largest product violation (exact SOS1
dichotomy realized through bound fixings).  Children are evaluated
eagerly at creation: their relaxations are solved, the heuristic hook
runs on their points, and provably-dominated children are pruned before
ever entering the queue.  The node count reports dequeued-and-processed
tree nodes (the solver-log convention the reference tables use), so an
instance closed during root processing reports a node count of 1.

Root processing optionally includes an incumbent-relative probing pass
(dichotomy on binaries and violated pairs; a side whose bound cannot
beat the incumbent within the gap target is pruned and the other side
fixed).  This takes the place of the commercial root cut loop and is
what lets tightly-bounded instances finish at the root.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .heuristics import RhConfig, RoundingHeuristic
from .qp import INFEASIBLE, OPTIMAL, UNBOUNDED, solve_qp
from .reformulate import SingleLevelModel, build_relaxation, relaxation_value

logger = logging.getLogger("spequil.bnb")

STATUS_OPTIMAL = "OptimalWithinGap"
STATUS_TIME = "TimeLimit"
STATUS_INFEASIBLE = "Infeasible"
STATUS_UNBOUNDED = "Unbounded"

_INT_TOL = 1e-8
_PAIR_TOL = 1e-8


class NoViolation(Exception):
    """The point satisfies all integralities and complementarities."""


@dataclass(frozen=True)
class BranchFixing:
    kind: str            # "binary" | "complementarity"
    index: int           # variable index (binary) or pair index
    value: int = 0       # binary value to pin
    side: str = "a"      # pair side pinned to zero

    @classmethod
    def binary(cls, index, value):
        return cls(kind="binary", index=int(index), value=int(value))

    @classmethod
    def complementarity(cls, pair_index, side):
        return cls(kind="complementarity", index=int(pair_index), side=side)

    def sibling(self):
        if self.kind == "binary":
            return BranchFixing.binary(self.index, 1 - self.value)
        return BranchFixing.complementarity(self.index, "b" if self.side == "a" else "a")


@dataclass
class BnbConfig:
    gap: float = 1e-4                 # relative optimality gap target
    time_limit: float = 600.0        # seconds, wall clock
    node_limit: Optional[int] = None
    workers: int = 1
    root_probing: bool = True
    probing_passes: int = 3
    seed: int = 0


@dataclass
class BnbResult:
    status: str
    obj_val: Optional[float]
    obj_bnd: Optional[float]
    gap: Optional[float]
    node_count: int
    root_relax: Optional[float]
    incumbent: Optional[np.ndarray]
    incumbent_groups: Optional[dict]
    events: list
    qp_solves: int
    runtime: float   # excluded from JSON (determinism contract)

    def to_json(self) -> str:
        payload = {
            "status": self.status,
            "obj_val": self.obj_val,
            "obj_bnd": self.obj_bnd,
            "gap": self.gap,
            "node_count": self.node_count,
            "root_relax": self.root_relax,
            "incumbent": None if self.incumbent is None else list(self.incumbent),
            "incumbent_groups": None if self.incumbent_groups is None else {
                k: list(v) for k, v in self.incumbent_groups.items()},
            "qp_solves": self.qp_solves,
            "events": self.events,
            "schema": "spequil.bnb.result.v1",
        }
        return json.dumps(payload, sort_keys=True)


@dataclass
class HeuristicContext:
    """Passed to the heuristic hook at every solved relaxation."""
    n_incumbents: int
    depth: int
    where: str            # "root" | "probe" | "child" | "fathom"
    rng: np.random.Generator
    force: bool = False   # bypass the invocation policy (fathoming repair)


def select_branch(relax_point: np.ndarray, model: SingleLevelModel,
                  int_tol: float = _INT_TOL, pair_tol: float = _PAIR_TOL) -> BranchFixing:
    """Pick the branching entity: fractional binary nearest 0.5 first, then
    the complementarity pair with the largest product violation.
    Raises NoViolation when the point is integral and complementary."""
    v = relax_point
    if model.binary_idx.size:
        zb = v[model.binary_idx]
        frac = np.abs(zb - np.round(zb))
        cand = np.where(frac > int_tol)[0]
        if cand.size:
            score = np.abs(zb[cand] - 0.5)
            k = cand[int(np.argmin(score))]   # argmin is first-on-ties: lowest index
            # preferred child: round toward the nearest integer
            return BranchFixing.binary(model.binary_idx[k], int(round(zb[k])))
    worst, worst_k = pair_tol, None
    for k, pair in enumerate(model.pairs):
        a, b = pair.values(v, model.ub)
        prod = a * b
        if prod > worst:
            worst, worst_k = prod, k
    if worst_k is None:
        raise NoViolation
    a, b = model.pairs[worst_k].values(v, model.ub)
    # preferred child pins the smaller side to zero
    return BranchFixing.complementarity(worst_k, "a" if a <= b else "b")


@dataclass(order=True)
class _Node:
    sort_key: tuple
    fixings: tuple = field(compare=False)
    bound: float = field(compare=False, default=np.nan)
    point: Optional[np.ndarray] = field(compare=False, default=None)
    depth: int = field(compare=False, default=0)


class _Engine:
    def __init__(self, model, config, heuristic):
        self.model = model
        self.config = config
        self.heuristic = heuristic
        self.rng = np.random.default_rng(config.seed)
        self.incumbent = None
        self.incumbent_val = -np.inf
        self.n_incumbents = 0
        self.pruned_max = -np.inf
        self.events = []
        self.node_count = 0
        self.qp_solves = 0
        self.t0 = time.monotonic()
        self.counter = itertools.count()
        self.heap = []
        self.root_relax = None
        self.pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None

    # --- bookkeeping ---------------------------------------------------
    def gap_term(self) -> float:
        return self.config.gap * max(1.0, abs(self.incumbent_val))

    def prune_level(self) -> float:
        return self.incumbent_val + self.gap_term()

    def out_of_time(self) -> bool:
        return time.monotonic() - self.t0 > self.config.time_limit

    def best_open(self) -> float:
        return -self.heap[0][0] if self.heap else -np.inf

    def current_bound(self) -> float:
        return max(self.incumbent_val, self.pruned_max, self.best_open())

    def gap_value(self):
        if self.incumbent is None:
            return None
        bound = self.current_bound()
        return max(0.0, bound - self.incumbent_val) / max(1.0, abs(self.incumbent_val))

    def closed(self) -> bool:
        return self.incumbent is not None and \
            self.current_bound() - self.incumbent_val <= self.gap_term() + 1e-12

    # --- relaxation ----------------------------------------------------
    def solve_node(self, fixings):
        self.qp_solves += 1
        qp = build_relaxation(self.model, fixings)
        sol = solve_qp(qp)
        if sol.status == OPTIMAL:
            return OPTIMAL, relaxation_value(self.model, sol.objective), sol.v
        return sol.status, None, None

    # --- incumbents ------------------------------------------------------
    def submit(self, cand: np.ndarray, source: str) -> bool:
        """Re-verify a candidate (never trust the callback) and keep if better."""
        if cand is None:
            return False
        cand = np.asarray(cand, dtype=float)
        rep = self.model.feasibility_report(cand)
        if max(rep.values()) > 1e-8:
            self.events.append({"type": "candidate_rejected", "source": source,
                                "violations": {k: float(x) for k, x in rep.items()}})
            return False
        val = self.model.objective_value(cand)
        if val <= self.incumbent_val + 1e-12:
            return False
        self.incumbent = cand
        self.incumbent_val = val
        self.n_incumbents += 1
        self.events.append({"type": "incumbent", "value": val, "source": source,
                            "point": [float(t) for t in cand]})
        logger.info("incumbent=%.8g source=%s", val, source)
        return True

    def run_heuristic(self, point, where, depth, force=False):
        if self.heuristic is None or point is None:
            return
        ctx = HeuristicContext(n_incumbents=self.n_incumbents, depth=depth,
                               where=where, rng=self.rng, force=force)
        try:
            cands = self.heuristic(point, self.model, ctx)
        except Exception as exc:   # heuristic failures never kill the search
            self.events.append({"type": "heuristic_error", "error": repr(exc)})
            return
        for cand in cands or []:
            self.submit(cand, source=f"heuristic@{where}")

    def fathom_with_repair(self, point, bound, depth):
        """Feasible-looking node: submit the point, or repair it through the
        heuristic at the same leader decision, then absorb the bound."""
        if self.submit(point, source="relaxation"):
            self.pruned_max = max(self.pruned_max, bound)
            return
        self.run_heuristic(point, "fathom", depth, force=True)
        self.pruned_max = max(self.pruned_max, bound)

    # --- probing ---------------------------------------------------------
    def probe_root(self, root_fixings):
        """Incumbent-relative dichotomy probing; returns updated fixings/bound/point."""
        fixings = list(root_fixings)
        bound, point = None, None
        for _ in range(self.config.probing_passes):
            status, bound, point = self.solve_node(fixings)
            if status != OPTIMAL:
                return fixings, status, bound, point
            self.run_heuristic(point, "probe", 0)
            if self.closed_at(bound):
                return fixings, OPTIMAL, bound, point
            changed = False
            fixed_bins = {f.index for f in fixings if f.kind == "binary"}
            fixed_pairs = {f.index for f in fixings if f.kind == "complementarity"}
            # binaries first, then pairs violated at the current point
            jobs = [BranchFixing.binary(j, 0) for j in self.model.binary_idx
                    if j not in fixed_bins]
            for k, pair in enumerate(self.model.pairs):
                if k in fixed_pairs:
                    continue
                a, b = pair.values(point, self.model.ub)
                if a * b > _PAIR_TOL:
                    jobs.append(BranchFixing.complementarity(k, "a"))
            for fix in jobs:
                if self.out_of_time():
                    break
                stat_a, val_a, pt_a = self.solve_node(fixings + [fix])
                if stat_a == OPTIMAL:
                    self.run_heuristic(pt_a, "probe", 1)
                dead_a = stat_a == INFEASIBLE or (
                    stat_a == OPTIMAL and val_a <= self.prune_level())
                if not dead_a:
                    continue
                if stat_a == OPTIMAL:
                    self.pruned_max = max(self.pruned_max, val_a)
                fixings.append(fix.sibling())
                changed = True
                self.events.append({"type": "probe_fix", "fixing": repr(fix.sibling())})
            if not changed or self.out_of_time():
                break
        status, bound, point = self.solve_node(fixings)
        if status == OPTIMAL:
            self.run_heuristic(point, "probe", 0)
        return fixings, status, bound, point

    def closed_at(self, bound) -> bool:
        return self.incumbent is not None and \
            max(bound, self.pruned_max, self.incumbent_val) - self.incumbent_val \
            <= self.gap_term() + 1e-12


def solve(model: SingleLevelModel, config: Optional[BnbConfig] = None,
          heuristic: Optional[Callable] = None) -> BnbResult:
    """Run branch-and-bound on a (bound-safe) Duality-based model."""
    if model.nonconvex:
        raise ValueError("branch-and-bound bounds require the Duality-based model")
    config = config or BnbConfig()
    if heuristic is None:
        # repair-only fallback so feasible-looking leaves can still be fathomed
        heuristic = RoundingHeuristic(
            model.problem, RhConfig(always_until_incumbents=0, bernoulli_p=0.0))
    eng = _Engine(model, config, heuristic)

    def result(status, extra_bound=-np.inf):
        bound = max(eng.incumbent_val, eng.pruned_max, eng.best_open(), extra_bound)
        obj_val = None if eng.incumbent is None else eng.incumbent_val
        obj_bnd = None if bound == -np.inf else bound
        gap = None
        if obj_val is not None and obj_bnd is not None:
            gap = max(0.0, obj_bnd - obj_val) / max(1.0, abs(obj_val))
        groups = None if eng.incumbent is None else {
            k: v for k, v in model.unpack(eng.incumbent).items()}
        return BnbResult(status=status, obj_val=obj_val, obj_bnd=obj_bnd, gap=gap,
                         node_count=eng.node_count, root_relax=eng.root_relax,
                         incumbent=eng.incumbent, incumbent_groups=groups,
                         events=eng.events, qp_solves=eng.qp_solves,
                         runtime=time.monotonic() - eng.t0)

    # ----- root processing (node 1) -----
    status, bound, point = eng.solve_node([])
    eng.node_count = 1
    if status == INFEASIBLE:
        return result(STATUS_INFEASIBLE)
    if status == UNBOUNDED:
        eng.events.append({"type": "unbounded", "node": 0})
        return result(STATUS_UNBOUNDED)
    if status != OPTIMAL:
        return result(STATUS_TIME)
    eng.root_relax = bound
    eng.events.append({"type": "root", "bound": bound})
    logger.info("node=0 bound=%.8g incumbent=%s gap=%s depth=0", bound,
                eng.incumbent_val, eng.gap_value())
    eng.run_heuristic(point, "root", 0)

    root_fixings: tuple = ()
    try:
        select_branch(point, model)
    except NoViolation:
        eng.fathom_with_repair(point, bound, 0)
        return result(STATUS_OPTIMAL if eng.incumbent is not None else STATUS_INFEASIBLE)

    if config.root_probing and not eng.closed_at(bound):
        fixings, status, bound2, point2 = eng.probe_root([])
        if status == OPTIMAL:
            root_fixings, bound, point = tuple(fixings), bound2, point2
        elif status == INFEASIBLE:
            # probing fixings are exact: remaining region empty beyond pruned sides
            return result(STATUS_OPTIMAL if eng.incumbent is not None else STATUS_INFEASIBLE)

    if eng.closed_at(bound):
        eng.pruned_max = max(eng.pruned_max, min(bound, eng.prune_level()))
        return result(STATUS_OPTIMAL)

    heapq.heappush(eng.heap, (-bound, next(eng.counter),
                              _Node(sort_key=(), fixings=root_fixings, bound=bound,
                                    point=point, depth=0)))

    # ----- tree search -----
    while eng.heap:
        if eng.out_of_time():
            return result(STATUS_TIME)
        if config.node_limit is not None and eng.node_count >= config.node_limit:
            return result(STATUS_TIME)
        neg_bound, _, node = heapq.heappop(eng.heap)
        node_bound = -neg_bound
        if node_bound <= eng.prune_level():
            eng.pruned_max = max(eng.pruned_max, node_bound)
            continue
        if node.depth > 0:
            eng.node_count += 1
        eng.events.append({"type": "node", "n": eng.node_count, "bound": node_bound,
                           "incumbent": eng.incumbent_val if eng.incumbent is not None else None,
                           "depth": node.depth})
        logger.info("node=%d bound=%.8g incumbent=%.8g gap=%s depth=%d",
                    eng.node_count, node_bound, eng.incumbent_val,
                    eng.gap_value(), node.depth)

        try:
            fix = select_branch(node.point, model)
        except NoViolation:
            eng.fathom_with_repair(node.point, node_bound, node.depth)
            if eng.closed():
                return result(STATUS_OPTIMAL)
            continue

        children = [node.fixings + (fix,), node.fixings + (fix.sibling(),)]
        if eng.pool is not None:
            solved = list(eng.pool.map(eng.solve_node, children))
        else:
            solved = [eng.solve_node(ch) for ch in children]
        for ch_fix, (st, val, pt) in zip(children, solved):
            if st == INFEASIBLE:
                eng.events.append({"type": "child_infeasible", "depth": node.depth + 1})
                continue
            if st == UNBOUNDED:
                eng.events.append({"type": "unbounded", "depth": node.depth + 1})
                return result(STATUS_UNBOUNDED, extra_bound=np.inf)
            if st != OPTIMAL:
                # inconclusive child: keep searching from the parent bound
                heapq.heappush(eng.heap, (-node_bound, next(eng.counter),
                                          _Node(sort_key=(), fixings=ch_fix,
                                                bound=node_bound, point=node.point,
                                                depth=node.depth + 1)))
                continue
            eng.run_heuristic(pt, "child", node.depth + 1)
            try:
                select_branch(pt, model)
                feasible_leaf = False
            except NoViolation:
                feasible_leaf = True
            if feasible_leaf:
                eng.fathom_with_repair(pt, val, node.depth + 1)
            elif val <= eng.prune_level():
                eng.pruned_max = max(eng.pruned_max, val)
            else:
                heapq.heappush(eng.heap, (-val, next(eng.counter),
                                          _Node(sort_key=(), fixings=ch_fix, bound=val,
                                                point=pt, depth=node.depth + 1)))
        if eng.closed():
            return result(STATUS_OPTIMAL)

    if eng.incumbent is not None:
        if eng.closed():
            return result(STATUS_OPTIMAL)
        # exhausted tree but a fathomed bound stayed above the incumbent
        eng.events.append({"type": "exhausted_gap_open"})
        return result(STATUS_TIME)
    return result(STATUS_INFEASIBLE)

"""Rounding heuristic (RH): feasible incumbents from fractional node points.

Opening decisions above the threshold are rounded to 1 and the rest
closed; production gated by a closed facility drops to zero; any leader
row still violated (a generic budget-style row) is repaired by
proportional downscaling of the continuous block.  The follower primal
and dual QPs are then solved at the rounded leader decision (one pair
per uncertainty block: 2K convex QPs for a K-sample problem), prices are
selected on the optimal dual face subject to nonnegativity, and the
assembled point is returned for re-verification by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .follower import (
    FollowerInfeasible,
    NegativePriceError,
    _View,
    _face_duals,
    solve_follower_dual,
    solve_follower_primal,
)
from .problem import BilevelSpeProblem
from .reformulate import SingleLevelModel


@dataclass
class RhConfig:
    threshold: float = 0.5              # RndTh: round z up strictly above this
    always_until_incumbents: int = 2    # invoke at every node until this many incumbents
    bernoulli_p: float = 0.05           # afterwards fire with this probability

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if not 0.0 <= self.bernoulli_p <= 1.0:
            raise ValueError("bernoulli_p must lie in [0, 1]")


@dataclass
class RhFailure:
    reason: str            # "negative_price" | "follower_infeasible" | "leader_violation"
    detail: str = ""


@dataclass
class RhOutcome:
    candidate: Optional[np.ndarray]
    failure: Optional[RhFailure]
    qp_solves: int         # follower QPs solved in this invocation (2K on success)
    z_rounded: Optional[np.ndarray] = None
    x_repaired: Optional[np.ndarray] = None


def detect_gates(problem: BilevelSpeProblem) -> dict:
    """Map x index -> binary z indices gating it, read off two-entry leader
    rows of the form a*x_j + b*z_i <= 0 with a > 0 > b."""
    gates: dict = {j: [] for j in range(problem.n_x)}
    A, b = problem.A_P, problem.b_P
    for k in range(A.shape[0]):
        if abs(b[k]) > 1e-12:
            continue
        row = A[k]
        zpart = row[:problem.n_z]
        xpart = row[problem.n_z:]
        znz = np.nonzero(zpart)[0]
        xnz = np.nonzero(xpart)[0]
        if len(znz) == 1 and len(xnz) == 1 and xpart[xnz[0]] > 0 and zpart[znz[0]] < 0 \
                and problem.integer_mask_z[znz[0]]:
            gates[int(xnz[0])].append(int(znz[0]))
    return gates


def _repair_leader_rows(problem, z_t, x_t):
    """Proportionally scale the continuous block until the leader rows hold."""
    A, b = problem.A_P, problem.b_P
    if A.shape[0] == 0:
        return x_t, True
    for _ in range(4):
        lhs = A @ np.concatenate([z_t, x_t])
        viol = lhs - b
        bad = np.where(viol > 1e-10 * (1 + np.abs(b)))[0]
        if bad.size == 0:
            return x_t, True
        scale = 1.0
        for k in bad:
            xpart = A[k, problem.n_z:]
            contrib = float(xpart @ x_t)
            base = float(A[k, :problem.n_z] @ z_t)
            if contrib <= 1e-12 or np.any(xpart < -1e-12) or b[k] - base < -1e-12:
                return x_t, False   # not a scalable row
            scale = min(scale, max(0.0, (b[k] - base) / contrib))
        x_t = scale * x_t
    lhs = A @ np.concatenate([z_t, x_t])
    return x_t, bool(np.all(lhs - b <= 1e-10 * (1 + np.abs(b))))


def round_and_repair(problem: BilevelSpeProblem, fractional_z, fractional_x,
                     config: RhConfig, model: Optional[SingleLevelModel] = None) -> RhOutcome:
    """Algorithm: threshold-round z, zero gated x, repair leader rows, solve
    the follower primal and dual per block, select nonnegative prices."""
    z_hat = np.asarray(fractional_z, dtype=float)
    x_hat = np.asarray(fractional_x, dtype=float)
    z_t = z_hat.copy()
    z_t[problem.integer_mask_z] = (z_hat[problem.integer_mask_z] > config.threshold).astype(float)

    gates = detect_gates(problem)
    x_t = x_hat.copy()
    for j, gating in gates.items():
        if gating and any(z_t[i] < 0.5 for i in gating):
            x_t[j] = 0.0
    x_t = np.clip(x_t, 0.0, problem.ub_x)

    x_t, ok = _repair_leader_rows(problem, z_t, x_t)
    if not ok:
        return RhOutcome(None, RhFailure("leader_violation"), 0,
                         z_rounded=z_t, x_repaired=x_t)

    qp_solves = 0
    parts = {k: np.zeros(n) for k, n in [
        ("y", problem.n_y), ("w", problem.n_w), ("mu_y", problem.n_y),
        ("mu_w", problem.n_w), ("theta_y", problem.n_y), ("theta_w", problem.n_w)]}
    pi0 = np.zeros(problem.m0)
    pi1 = np.zeros(problem.m1)
    try:
        for blk in problem.blocks:
            view = _View(problem, blk)
            primal = solve_follower_primal(problem, x_t, block=blk)
            qp_solves += 1
            dual = solve_follower_dual(problem, x_t, block=blk)
            qp_solves += 1
            if abs(primal.objective - dual.objective) > 1e-6 * (1 + abs(primal.objective)):
                return RhOutcome(None, RhFailure(
                    "follower_infeasible",
                    f"strong duality violated: {primal.objective} vs {dual.objective}"),
                    qp_solves, z_rounded=z_t, x_repaired=x_t)
            got = _face_duals(view, x_t, primal.y, primal.w, require_nonneg=True)
            if got is None:
                return RhOutcome(None, RhFailure("negative_price"), qp_solves,
                                 z_rounded=z_t, x_repaired=x_t)
            pi, mu_y, mu_w, th_y, th_w, _ = got
            parts["y"][view.y_idx] = primal.y
            parts["w"][view.w_idx] = primal.w
            parts["mu_y"][view.y_idx] = mu_y
            parts["mu_w"][view.w_idx] = mu_w
            parts["theta_y"][view.y_idx] = th_y
            parts["theta_w"][view.w_idx] = th_w
            pi0[view.row0] = pi[:view.m0]
            pi1[view.row1] = pi[view.m0:]
    except NegativePriceError:
        return RhOutcome(None, RhFailure("negative_price"), qp_solves,
                         z_rounded=z_t, x_repaired=x_t)
    except FollowerInfeasible as exc:
        return RhOutcome(None, RhFailure("follower_infeasible", str(exc)), qp_solves,
                         z_rounded=z_t, x_repaired=x_t)
    except ValueError as exc:
        return RhOutcome(None, RhFailure("leader_violation", str(exc)), qp_solves,
                         z_rounded=z_t, x_repaired=x_t)

    if model is None:
        from .reformulate import build_duality_model
        model = build_duality_model(problem)
    cand = model.pack(z=z_t, x=x_t, y=parts["y"], w=parts["w"], pi0=pi0, pi1=pi1,
                      mu_y=parts["mu_y"], mu_w=parts["mu_w"],
                      th_y=parts["theta_y"], th_w=parts["theta_w"])
    return RhOutcome(cand, None, qp_solves, z_rounded=z_t, x_repaired=x_t)


def round_and_repair_rgup(problem: BilevelSpeProblem, fractional_z, fractional_x,
                          samples, config: RhConfig,
                          model: Optional[SingleLevelModel] = None) -> RhOutcome:
    """Per-sample variant: one primal and one dual QP per uncertainty sample
    (2K solves total); the objective is the sample average by construction."""
    K = np.atleast_2d(np.asarray(samples, dtype=float)).shape[0]
    if len(problem.blocks) != K:
        raise ValueError(f"problem has {len(problem.blocks)} blocks, samples say K={K}")
    out = round_and_repair(problem, fractional_z, fractional_x, config, model=model)
    if out.candidate is not None and out.qp_solves != 2 * K:
        raise AssertionError(f"expected 2K={2 * K} follower QP solves, did {out.qp_solves}")
    return out


class RoundingHeuristic:
    """Branch-and-bound hook wrapping round_and_repair with the invocation
    policy: every node until `always_until_incumbents` incumbents exist,
    then Bernoulli(bernoulli_p) per node (p=0 stops entirely)."""

    def __init__(self, problem: BilevelSpeProblem, config: Optional[RhConfig] = None):
        self.problem = problem
        self.config = config or RhConfig()
        self.total_qp_solves = 0
        self.invocations = 0
        self.outcomes: list = []

    def should_fire(self, ctx) -> bool:
        if ctx.force:
            return True
        if ctx.n_incumbents < self.config.always_until_incumbents:
            return True
        if self.config.bernoulli_p <= 0.0:
            return False
        return bool(ctx.rng.random() < self.config.bernoulli_p)

    def __call__(self, point, model: SingleLevelModel, ctx):
        if not self.should_fire(ctx):
            return []
        self.invocations += 1
        z_hat = point[model.slices["z"]]
        x_hat = point[model.slices["x"]]
        out = round_and_repair(self.problem, z_hat, x_hat, self.config, model=model)
        self.total_qp_solves += out.qp_solves
        self.outcomes.append(out.failure.reason if out.failure else "candidate")
        return [] if out.candidate is None else [out.candidate]


def rgup_heuristic(problem: BilevelSpeProblem) -> RoundingHeuristic:
    """RGUP policy: every node until the first incumbent, then stop."""
    return RoundingHeuristic(problem, RhConfig(always_until_incumbents=1, bernoulli_p=0.0))

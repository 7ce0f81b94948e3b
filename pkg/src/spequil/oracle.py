"""Brute-force grid oracle for small instances.

Enumerates the binary leader patterns, grids the continuous leader
variables, solves the follower at every leader-polyhedron-feasible grid
point, and keeps the best bilevel-feasible value (optimistic price
selection, prices nonnegative).  The value reported is the Duality-model
objective at the assembled KKT point, identical to the branch-and-bound
incumbent metric.

For EFL-shaped instances (no w block, all follower bounds infinite,
single block, h = 0) an exact fast path evaluates whole grid chunks per
discovered complementarity pattern through cached affine solution maps;
points not covered by any cached pattern fall back to the generic
interior-point evaluation, which also seeds new patterns.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .follower import FollowerInfeasible, NegativePriceError, follower_kkt_point
from .heuristics import detect_gates
from .problem import BilevelSpeProblem
from .reformulate import build_duality_model


class TooLarge(ValueError):
    pass


@dataclass
class OracleResult:
    value: float
    z_best: Optional[np.ndarray]
    x_best: Optional[np.ndarray]
    points_evaluated: int
    points_feasible: int
    lipschitz_estimate: float
    resolution_bound: float
    step: float

    def to_dict(self) -> dict:
        return {
            "value": None if self.value == -np.inf else self.value,
            "z_best": None if self.z_best is None else list(self.z_best),
            "x_best": None if self.x_best is None else list(self.x_best),
            "points_evaluated": self.points_evaluated,
            "points_feasible": self.points_feasible,
            "lipschitz_estimate": self.lipschitz_estimate,
            "resolution_bound": self.resolution_bound,
            "step": self.step,
        }


def _axis_values(ub, step):
    if ub <= 0:
        return np.array([0.0])
    vals = np.arange(0.0, ub + 1e-12, step)
    if ub - vals[-1] > 1e-9:
        vals = np.append(vals, ub)
    return vals


def _interval(vals: np.ndarray, coefs: np.ndarray, tol, npts: int):
    """Feasible t-interval for vals[:, j] + coefs[j] * t >= -tol per point."""
    lo = np.full(npts, -np.inf)
    hi = np.full(npts, np.inf)
    for j in range(len(coefs)):
        c = coefs[j]
        if abs(c) <= 1e-12:
            bad = vals[:, j] < -tol
            lo[bad], hi[bad] = 1.0, 0.0   # empty interval
        elif c > 0:
            lo = np.maximum(lo, (-tol - vals[:, j]) / c)
        else:
            hi = np.minimum(hi, (-tol - vals[:, j]) / c)
    return lo, hi


def _is_efl_shaped(p: BilevelSpeProblem) -> bool:
    return (p.n_w == 0 and bool(np.all(np.isinf(p.ub_y))) and len(p.blocks) == 1
            and np.abs(p.h).max(initial=0.0) == 0.0)


class _EflPatternPool:
    """Affine follower solution maps keyed by the lower-bound active set.

    For active set A the free part solves a fixed KKT system with an
    x-affine right-hand side, so y, pi, the stationarity residual, and
    the multipliers are all affine in x and can be evaluated for a whole
    chunk of grid points at once.  Rank-deficient patterns surface as a
    nonzero residual map and fall back to the generic evaluation.
    """

    def __init__(self, problem: BilevelSpeProblem):
        self.p = problem
        self.G = problem.G
        self.m = problem.m0 + problem.m1
        self.pmask = np.concatenate(
            [np.ones(problem.m0, dtype=bool), problem.pi1_price_mask])
        self.patterns: dict = {}

    def ensure(self, active: tuple) -> bool:
        """Cache the affine maps for an active set; True if newly added."""
        if active in self.patterns:
            return False
        p = self.p
        act = set(active)
        free = np.array([i for i in range(p.n_y) if i not in act], dtype=int)
        nf, m = len(free), self.m
        K = np.zeros((nf + m, nf + m))
        K[:nf, :nf] = p.R[np.ix_(free, free)]
        K[:nf, nf:] = self.G[:, free].T
        K[nf:, :nf] = self.G[:, free]
        Kp = np.linalg.pinv(K)
        rhs0 = np.concatenate([-p.r[free], np.zeros(m)])
        B = np.zeros((nf + m, p.n_x))
        B[nf:nf + p.m0, :] = p.x_coupling
        sol0, Sx = Kp @ rhs0, Kp @ B
        # dual face directions: null space of G_F' (constant per pattern)
        if nf:
            _, sv, Vt = np.linalg.svd(self.G[:, free].T, full_matrices=True)
            rank = int((sv > 1e-9 * max(1.0, sv.max(initial=0.0))).sum())
            Nspace = Vt[rank:].T      # m x k
        else:
            Nspace = np.eye(m)
        self.patterns[active] = {
            "free": free,
            "active": np.array(sorted(act), dtype=int),
            "y0": sol0[:nf], "Yx": Sx[:nf],
            "pi0c": sol0[nf:], "Pix": Sx[nf:],
            "res0": K @ sol0 - rhs0, "Resx": K @ Sx - B,
            "dual_unique": Nspace.shape[1] == 0,
            "null_dir": Nspace[:, 0] if Nspace.shape[1] == 1 else None,
        }
        return True

    def evaluate(self, Xc: np.ndarray):
        """(values, lipschitz, covered) per row of Xc over cached patterns.
        Values are the raw follower revenue part -<Phi(y), y>."""
        p = self.p
        npts = Xc.shape[0]
        best = np.full(npts, -np.inf)
        lip = np.zeros(npts)
        covered = np.zeros(npts, dtype=bool)
        tol = 1e-7
        for entry in self.patterns.values():
            free, act = entry["free"], entry["active"]
            Y = Xc @ entry["Yx"].T + entry["y0"]
            PI = Xc @ entry["Pix"].T + entry["pi0c"]
            RES = Xc @ entry["Resx"].T + entry["res0"]
            scale = 1.0 + np.abs(Y).max(initial=0.0)
            prim_ok = np.abs(RES).max(axis=1, initial=0.0) <= 1e-7 * scale
            if free.size:
                prim_ok &= Y.min(axis=1) >= -tol * scale
            MU = (p.r[act] + Y @ p.R[np.ix_(act, free)].T + PI @ self.G[:, act]) \
                if act.size else np.zeros((npts, 0))
            mu_scale = tol * (1.0 + np.abs(MU).max(initial=0.0))
            pi_scale = 1e-8 * (1.0 + np.abs(PI).max(initial=0.0))
            if entry["dual_unique"]:
                opt_ok = prim_ok
                if act.size:
                    opt_ok = opt_ok & (MU.min(axis=1) >= -mu_scale)
                price_ok = PI[:, self.pmask].min(axis=1, initial=0.0) >= -pi_scale
                ok = opt_ok & price_ok
                covered |= opt_ok   # failed price check is an exact infeasibility
            elif entry["null_dir"] is not None:
                # one-dimensional dual face: interval feasibility in t for
                # mu(t) = MU + (G_A' n) t >= 0 and priced pi(t) = PI + n t >= 0
                n_dir = entry["null_dir"]
                mu_coef = n_dir @ self.G[:, act] if act.size else np.zeros(0)
                lo_mu, hi_mu = _interval(MU, mu_coef, mu_scale, npts)
                opt_ok = prim_ok & (lo_mu <= hi_mu)
                PIm = PI[:, self.pmask]
                pi_coef = n_dir[self.pmask]
                lo_pi, hi_pi = _interval(PIm, pi_coef, pi_scale, npts)
                ok = opt_ok & (np.maximum(lo_mu, lo_pi) <= np.minimum(hi_mu, hi_pi))
                covered |= opt_ok   # interval test is exact on this face
            else:
                # higher-dimensional dual degeneracy: only full passes covered
                opt_ok = prim_ok
                if act.size:
                    opt_ok = opt_ok & (MU.min(axis=1) >= -mu_scale)
                ok = opt_ok & (PI[:, self.pmask].min(axis=1, initial=0.0) >= -pi_scale)
                covered |= ok
            if not ok.any():
                continue
            val = -(np.einsum("ij,jk,ik->i", Y, p.R[np.ix_(free, free)], Y)
                    + Y @ p.r[free])
            upd = ok & (val > best + 1e-12)
            best[upd] = val[upd]
            lip[upd] = np.abs(PI[:, :p.m0] @ p.x_coupling - p.c_x).max(axis=1)[upd]
        return best, lip, covered

    def pattern_of(self, y: np.ndarray) -> tuple:
        scale = 1.0 + np.abs(y).max(initial=0.0)
        return tuple(np.where(y <= 1e-7 * scale)[0].tolist())


def _generic_follower_value(problem, model, x):
    """Raw follower revenue part and Lipschitz proxy at x, or None."""
    try:
        pt = follower_kkt_point(problem, x)
    except (NegativePriceError, FollowerInfeasible, ValueError):
        return None
    cand = model.pack(z=np.zeros(problem.n_z), x=np.zeros(problem.n_x),
                      y=pt["y"], w=pt["w"], pi0=pt["pi0"], pi1=pt["pi1"],
                      mu_y=pt["mu_y"], mu_w=pt["mu_w"],
                      th_y=pt["theta_y"], th_w=pt["theta_w"])
    raw = model.objective_value(cand)   # leader terms vanish at z = x = 0
    lipp = float(np.abs(pt["pi0"] @ problem.x_coupling - problem.c_x).max(initial=0.0))
    return raw, lipp, pt


def _probe_point(problem, model, x):
    """(raw value or -inf, lipschitz, primal y or None).

    The primal pattern is reported even when no nonnegative price selection
    exists, so the pattern pool can learn price-infeasible regions too."""
    from .follower import solve_follower_primal
    try:
        primal = solve_follower_primal(problem, x)
    except (FollowerInfeasible, ValueError):
        return -np.inf, 0.0, None
    got = _generic_follower_value(problem, model, x)
    if got is None:
        return -np.inf, 0.0, primal.y
    return got[0], got[1], primal.y


def grid_oracle(problem: BilevelSpeProblem, step: float,
                cap: int = 1_000_000, use_fast_path: Optional[bool] = None) -> OracleResult:
    """Exhaustive leader grid search; raises TooLarge beyond `cap` points."""
    p = problem
    model = build_duality_model(p)
    if use_fast_path is None:
        use_fast_path = _is_efl_shaped(p)
    pool = _EflPatternPool(p) if use_fast_path else None
    gates = detect_gates(p)

    nbin = int(p.integer_mask_z.sum() + p.integer_mask_x.sum())
    if nbin > 8:
        raise TooLarge(f"{nbin} binaries exceed the enumeration cap of 8")
    zi = np.where(p.integer_mask_z)[0]
    xi = np.where(p.integer_mask_x)[0]
    cont_z = [j for j in range(p.n_z) if not p.integer_mask_z[j]]
    cont_x = [j for j in range(p.n_x) if not p.integer_mask_x[j]]

    total_pts, n_feas = 0, 0
    best_val, best_z, best_x = -np.inf, None, None
    lip, max_grid_dims = 0.0, 0
    infeas_floor: list = []   # known primal-infeasible x (upward closed set)

    for bits in itertools.product((0.0, 1.0), repeat=len(zi) + len(xi)):
        z = np.zeros(p.n_z)
        z[zi] = bits[:len(zi)]
        axes, axis_dims = [], []
        for j in cont_z:
            axes.append(_axis_values(p.ub_z[j], step))
            axis_dims.append(("z", j))
        for j in cont_x:
            if gates.get(j) and any(z[i] < 0.5 for i in gates[j]):
                axes.append(np.array([0.0]))
            else:
                axes.append(_axis_values(p.ub_x[j], step))
            axis_dims.append(("x", j))
        n_pattern = int(np.prod([len(a) for a in axes])) if axes else 1
        if total_pts + n_pattern > cap:
            raise TooLarge(f"grid would exceed {cap} points")
        total_pts += n_pattern
        max_grid_dims = max(max_grid_dims, sum(len(a) > 1 for a in axes))

        if axes:
            mesh = np.meshgrid(*axes, indexing="ij")
            grid = np.stack([m.ravel() for m in mesh], axis=1)
        else:
            grid = np.zeros((1, 0))
        Z = np.tile(z, (grid.shape[0], 1))
        X = np.zeros((grid.shape[0], p.n_x))
        X[:, xi] = np.asarray(bits[len(zi):])
        for col, (kind, j) in enumerate(axis_dims):
            (Z if kind == "z" else X)[:, j] = grid[:, col]

        if p.A_P.shape[0]:
            lhs = Z @ p.A_P[:, :p.n_z].T + X @ p.A_P[:, p.n_z:].T
            feas = np.all(lhs <= p.b_P + 1e-9 * (1 + np.abs(p.b_P)), axis=1)
            Z, X = Z[feas], X[feas]
        if X.shape[0] == 0:
            continue

        raw = np.full(X.shape[0], -np.inf)
        lips = np.zeros(X.shape[0])
        if pool is not None:
            overrides: dict = {}
            for _ in range(256):   # pattern discovery rounds
                raw, lips, covered = pool.evaluate(X)
                if infeas_floor:
                    # feasible q is downward closed: dominated points are dead
                    dom = np.zeros(X.shape[0], dtype=bool)
                    for f in infeas_floor:
                        dom |= np.all(X >= f - 1e-9, axis=1)
                    covered |= dom
                    raw[dom & (raw > -np.inf)] = -np.inf
                todo = [i for i in np.where(~covered)[0] if i not in overrides]
                if not todo:
                    break
                i = todo[0]
                raw_i, lip_i, y_i = _probe_point(p, model, X[i])
                if y_i is None:
                    infeas_floor.append(X[i].copy())
                    overrides[i] = (-np.inf, 0.0)
                    continue
                pat = pool.pattern_of(y_i)
                if not pool.ensure(pat):
                    overrides[i] = (raw_i, lip_i)   # pattern known but mask missed
            else:
                for i in np.where(~covered)[0]:
                    if i in overrides:
                        continue
                    got = _probe_point(p, model, X[i])
                    overrides[i] = (got[0], got[1])
            for i, (v, li) in overrides.items():
                raw[i], lips[i] = v, li
        else:
            for i in range(X.shape[0]):
                got = _generic_follower_value(p, model, X[i])
                if got is not None:
                    raw[i], lips[i] = got[0], got[1]

        vals = raw - Z @ p.c_z - X @ p.c_x
        feas_mask = raw > -np.inf
        n_feas += int(feas_mask.sum())
        if feas_mask.any():
            vals_masked = np.where(feas_mask, vals, -np.inf)
            k = int(np.argmax(vals_masked))
            if vals_masked[k] > best_val:
                best_val = float(vals_masked[k])
                best_z, best_x = Z[k].copy(), X[k].copy()
            lip = max(lip, float(lips[feas_mask].max(initial=0.0)))

    resolution = lip * (step / 2.0) * max(1, max_grid_dims)
    return OracleResult(value=best_val, z_best=best_z, x_best=best_x,
                        points_evaluated=total_pts, points_feasible=n_feas,
                        lipschitz_estimate=lip, resolution_bound=resolution,
                        step=step)

"""Lower-level solves for a fixed leader decision.

Primal convex QP, its concave dual QP (affine-cost closed form), KKT
residual checking, and the equilibrium-price map.  Primal solutions are
polished by an active-set refinement so returned points carry exact
zeros on active bounds; dual points are assembled by a direct linear
solve on the stationarity system with a complementarity pattern chosen
by an LP over the optimal dual face (optimistic: maximize revenue
pi0' D x, optionally subject to the price-nonnegativity mask).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .problem import BilevelSpeProblem, FollowerBlock
from .qp import OPTIMAL, UNBOUNDED, QpProblem, solve_lp, solve_qp


class FollowerInfeasible(Exception):
    """The follower polyhedron is empty at this leader decision."""


class NegativePriceError(Exception):
    """No equilibrium price selection satisfies the nonnegativity mask."""

    def __init__(self, message, pi0=None, pi1=None):
        super().__init__(message)
        self.pi0 = pi0
        self.pi1 = pi1


@dataclass
class FollowerPrimalSolution:
    y: np.ndarray
    w: np.ndarray
    objective: float


@dataclass
class FollowerDualSolution:
    pi0: np.ndarray
    pi1: np.ndarray
    mu_y: np.ndarray
    mu_w: np.ndarray
    theta_y: np.ndarray     # full length; zero on infinite-bound indices
    theta_w: np.ndarray
    objective: float
    multiple: bool = False  # dual face selection was not unique


@dataclass
class KktResidualReport:
    primal_eq: float
    primal_bounds: float
    dual_nonneg: float
    stationarity: float
    complementarity: float

    @property
    def max_residual(self) -> float:
        return max(self.primal_eq, self.primal_bounds, self.dual_nonneg,
                   self.stationarity, self.complementarity)


class _View:
    """Matrices of one follower block (or the whole stacked follower)."""

    def __init__(self, p: BilevelSpeProblem, block: Optional[FollowerBlock] = None):
        if block is None:
            self.y_idx = np.arange(p.n_y)
            self.w_idx = np.arange(p.n_w)
            self.row0 = np.arange(p.m0)
            self.row1 = np.arange(p.m1)
        else:
            self.y_idx = np.asarray(block.y_idx, dtype=int)
            self.w_idx = np.asarray(block.w_idx, dtype=int)
            self.row0 = np.asarray(block.row0_idx, dtype=int)
            self.row1 = np.asarray(block.row1_idx, dtype=int)
        self.G0 = p.G0[np.ix_(self.row0, self.y_idx)]
        self.G1 = p.G1[np.ix_(self.row1, self.y_idx)]
        self.H0 = p.H0[np.ix_(self.row0, self.w_idx)]
        self.H1 = p.H1[np.ix_(self.row1, self.w_idx)]
        self.D = p.x_coupling[self.row0, :]
        self.h0 = p.h0[self.row0]
        self.h1 = p.h1[self.row1]
        self.R = p.R[np.ix_(self.y_idx, self.y_idx)]
        self.r = p.r[self.y_idx]
        self.ub_y = p.ub_y[self.y_idx]
        self.ub_w = p.ub_w[self.w_idx]
        self.price_mask1 = p.pi1_price_mask[self.row1]
        self.n_y = len(self.y_idx)
        self.n_w = len(self.w_idx)
        self.m0 = len(self.row0)
        self.m1 = len(self.row1)

    @property
    def G(self):
        return np.vstack([self.G0, self.G1])

    @property
    def H(self):
        return np.vstack([self.H0, self.H1])

    def rhs(self, x):
        return np.concatenate([self.h0 + self.D @ x, self.h1])

    def phi(self, y):
        return self.R @ y + self.r

    def phi_p(self, y):
        return float(0.5 * y @ self.R @ y + self.r @ y)


def _check_x(p: BilevelSpeProblem, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if x.shape != (p.n_x,):
        raise ValueError(f"x has shape {x.shape}, expected ({p.n_x},)")
    tol = 1e-9 * (1 + np.abs(p.ub_x).max(initial=0.0))
    if np.any(x < -tol) or np.any(x > p.ub_x + tol):
        raise ValueError("x violates the leader box [0, ub_x]")
    return x


def _polish_primal(view: _View, x, y, w):
    """Pin near-active bounds to exact values and re-solve the free part."""
    v = np.concatenate([y, w])
    n = view.n_y + view.n_w
    lb = np.zeros(n)
    ub = np.concatenate([view.ub_y, view.ub_w])
    scale = np.maximum(1.0, np.abs(v))
    at_lb = v < 1e-7 * scale
    at_ub = np.isfinite(ub) & (ub - v < 1e-7 * scale) & ~at_lb
    fixed = at_lb | at_ub
    vfix = np.where(at_ub, ub, 0.0)

    Q = np.zeros((n, n))
    Q[:view.n_y, :view.n_y] = view.R
    q = np.concatenate([view.r, np.zeros(view.n_w)])
    A = np.hstack([view.G, view.H])
    b = view.rhs(x)

    free = ~fixed
    nf = int(free.sum())
    m = A.shape[0]
    K = np.zeros((nf + m, nf + m))
    K[:nf, :nf] = Q[np.ix_(free, free)]
    K[:nf, nf:] = A[:, free].T
    K[nf:, :nf] = A[:, free]
    rhs = np.concatenate([
        -(q[free] + Q[np.ix_(free, fixed)] @ vfix[fixed]),
        b - A[:, fixed] @ vfix[fixed],
    ])
    sol, _, _, _ = np.linalg.lstsq(K, rhs, rcond=None)
    if np.abs(K @ sol - rhs).max(initial=0.0) > 1e-9 * (1 + np.abs(rhs).max(initial=0.0)):
        return y, w  # inconsistent pattern; keep the IPM point
    vref = vfix.copy()
    vref[free] = sol[:nf]
    bad = (vref < lb - 1e-9 * scale) | (np.isfinite(ub) & (vref > ub + 1e-9 * scale))
    if bad.any():
        return y, w
    return vref[:view.n_y], vref[view.n_y:]


def solve_follower_primal(problem: BilevelSpeProblem, x,
                          block: Optional[FollowerBlock] = None,
                          polish: bool = True) -> FollowerPrimalSolution:
    """Solve the follower's convex QP at leader decision x (unique minimizer)."""
    x = _check_x(problem, x)
    view = _View(problem, block)
    n = view.n_y + view.n_w
    Q = np.zeros((n, n))
    Q[:view.n_y, :view.n_y] = view.R
    q = np.concatenate([view.r, np.zeros(view.n_w)])
    qp = QpProblem(
        Q=Q, q=q,
        A_eq=np.hstack([view.G, view.H]), b_eq=view.rhs(x),
        lb=np.zeros(n), ub=np.concatenate([view.ub_y, view.ub_w]),
    )
    sol = solve_qp(qp)
    if sol.status != OPTIMAL:
        raise FollowerInfeasible(f"follower solve returned {sol.status}: {sol.message}")
    y, w = sol.v[:view.n_y], sol.v[view.n_y:]
    if polish:
        y, w = _polish_primal(view, x, y, w)
    return FollowerPrimalSolution(y=y, w=w, objective=view.phi_p(y))


def _dual_qp(view: _View, x):
    """Concave dual as a minimization QP over v = (pi, mu_y, th_y_fin, mu_w, th_w_fin)."""
    fin_y = np.where(np.isfinite(view.ub_y))[0]
    fin_w = np.where(np.isfinite(view.ub_w))[0]
    m = view.m0 + view.m1
    n_v = m + view.n_y + len(fin_y) + view.n_w + len(fin_w)
    sl_pi = slice(0, m)
    sl_mu_y = slice(m, m + view.n_y)
    sl_th_y = slice(sl_mu_y.stop, sl_mu_y.stop + len(fin_y))
    sl_mu_w = slice(sl_th_y.stop, sl_th_y.stop + view.n_w)
    sl_th_w = slice(sl_mu_w.stop, sl_mu_w.stop + len(fin_w))

    E_y = np.zeros((view.n_y, len(fin_y)))
    E_y[fin_y, np.arange(len(fin_y))] = 1.0
    E_w = np.zeros((view.n_w, len(fin_w)))
    E_w[fin_w, np.arange(len(fin_w))] = 1.0

    # u = mu_y - E_y th_y - G' pi
    S = np.zeros((view.n_y, n_v))
    S[:, sl_pi] = -view.G.T
    S[:, sl_mu_y] = np.eye(view.n_y)
    S[:, sl_th_y] = -E_y

    Rinv = np.linalg.inv(view.R)
    Q = S.T @ Rinv @ S
    Q = 0.5 * (Q + Q.T)
    q = -S.T @ (Rinv @ view.r)
    q[sl_pi] += view.rhs(x)
    q[sl_th_y] += view.ub_y[fin_y]
    q[sl_th_w] += view.ub_w[fin_w]

    # w-stationarity is a hard dual constraint: H'pi + E_w th_w - mu_w = 0
    A_eq = np.zeros((view.n_w, n_v))
    A_eq[:, sl_pi] = view.H.T
    A_eq[:, sl_mu_w] = -np.eye(view.n_w)
    A_eq[:, sl_th_w] = E_w

    lb = np.zeros(n_v)
    lb[sl_pi] = -np.inf
    qp = QpProblem(Q=Q, q=q, A_eq=A_eq, b_eq=np.zeros(view.n_w), lb=lb)
    const = float(0.5 * view.r @ Rinv @ view.r)
    slices = dict(pi=sl_pi, mu_y=sl_mu_y, th_y=sl_th_y, mu_w=sl_mu_w, th_w=sl_th_w,
                  fin_y=fin_y, fin_w=fin_w)
    return qp, const, slices


def solve_follower_dual(problem: BilevelSpeProblem, x,
                        block: Optional[FollowerBlock] = None) -> FollowerDualSolution:
    """Solve the follower's dual QP; unbounded dual signals primal infeasibility."""
    x = _check_x(problem, x)
    view = _View(problem, block)
    qp, const, sl = _dual_qp(view, x)
    sol = solve_qp(qp)
    if sol.status == UNBOUNDED:
        raise FollowerInfeasible("dual unbounded: follower primal infeasible at this x")
    if sol.status != OPTIMAL:
        raise FollowerInfeasible(f"dual solve returned {sol.status}: {sol.message}")
    v = sol.v
    theta_y = np.zeros(view.n_y)
    theta_y[sl["fin_y"]] = v[sl["th_y"]]
    theta_w = np.zeros(view.n_w)
    theta_w[sl["fin_w"]] = v[sl["th_w"]]
    pi = v[sl["pi"]]
    return FollowerDualSolution(
        pi0=pi[:view.m0], pi1=pi[view.m0:],
        mu_y=v[sl["mu_y"]], mu_w=v[sl["mu_w"]],
        theta_y=theta_y, theta_w=theta_w,
        objective=-(sol.objective + const),
    )


def _face_duals(view: _View, x, y, w, require_nonneg: bool, act_tol: float = 1e-7):
    """Optimistic dual selection on the KKT face at the (polished) primal point.

    Returns (pi, mu_y, mu_w, theta_y, theta_w, multiple) or None when no
    selection satisfies the price mask.  The LP chooses the complementarity
    pattern; the returned numbers come from a direct stationarity solve.
    """
    scale_y = np.maximum(1.0, np.abs(y))
    scale_w = np.maximum(1.0, np.abs(w))
    mu_y_allowed = y <= act_tol * scale_y
    th_y_allowed = np.isfinite(view.ub_y) & (view.ub_y - y <= act_tol * scale_y)
    mu_w_allowed = w <= act_tol * scale_w
    th_w_allowed = np.isfinite(view.ub_w) & (view.ub_w - w <= act_tol * scale_w)

    qp, const, sl = _dual_qp(view, x)
    m = view.m0 + view.m1
    n_v = len(qp.q)

    # stationarity rows pin u = Phi(y):  mu_y - E th_y - G' pi = R y + r
    A_st = np.zeros((view.n_y, n_v))
    A_st[:, sl["pi"]] = -view.G.T
    A_st[:, sl["mu_y"]] = np.eye(view.n_y)
    fin_y = sl["fin_y"]
    A_st[fin_y, np.array(sl["th_y"].start) + np.arange(len(fin_y))] = -1.0
    b_st = view.phi(y)

    A_eq = np.vstack([A_st, qp.A_eq])
    b_eq = np.concatenate([b_st, qp.b_eq])

    ub = np.full(n_v, np.inf)
    ub[sl["mu_y"]] = np.where(mu_y_allowed, np.inf, 0.0)
    ub[sl["mu_w"]] = np.where(mu_w_allowed, np.inf, 0.0)
    ub[np.arange(sl["th_y"].start, sl["th_y"].stop)] = np.where(th_y_allowed[fin_y], np.inf, 0.0)
    fin_w = sl["fin_w"]
    ub[np.arange(sl["th_w"].start, sl["th_w"].stop)] = np.where(th_w_allowed[fin_w], np.inf, 0.0)
    lb = np.zeros(n_v)
    lb[sl["pi"]] = -np.inf
    if require_nonneg:
        lb_pi = np.concatenate([np.zeros(view.m0),
                                np.where(view.price_mask1, 0.0, -np.inf)])
        lb[sl["pi"]] = lb_pi

    rev = np.zeros(n_v)
    rev[: view.m0] = view.D @ x  # revenue coefficients on pi0

    def run(sense):
        lp = QpProblem(Q=np.zeros((n_v, n_v)), q=-sense * rev,
                       A_eq=A_eq, b_eq=b_eq, lb=lb, ub=ub)
        return solve_lp(lp)

    hi = run(+1.0)
    if hi.status != OPTIMAL:
        return None
    lo = run(-1.0)
    rev_hi = float(rev @ hi.v)
    rev_lo = float(rev @ lo.v) if lo.status == OPTIMAL else rev_hi
    multiple = abs(rev_hi - rev_lo) > 1e-7 * (1 + abs(rev_hi)) or (
        lo.status == OPTIMAL and np.abs(hi.v[sl["pi"]] - lo.v[sl["pi"]]).max(initial=0.0)
        > 1e-6 * (1 + np.abs(hi.v[sl["pi"]]).max(initial=0.0)))

    # refine: keep the LP's support pattern, solve stationarity exactly
    v = hi.v
    supp_tol = 1e-7 * (1 + np.abs(v).max())
    free_cols = list(range(m))
    for s in ("mu_y", "th_y", "mu_w", "th_w"):
        idx = np.arange(sl[s].start, sl[s].stop)
        free_cols.extend(idx[v[idx] > supp_tol].tolist())
    free_cols = np.unique(free_cols)
    Afree = A_eq[:, free_cols]
    solv, _, _, _ = np.linalg.lstsq(Afree, b_eq, rcond=None)
    vref = np.zeros(n_v)
    vref[free_cols] = solv
    resid = np.abs(Afree @ solv - b_eq).max(initial=0.0)
    neg = -min(vref[m:].min(initial=0.0), 0.0)
    price = vref[sl["pi"]]
    price_ok = True
    if require_nonneg:
        pmask = np.concatenate([np.ones(view.m0, bool), view.price_mask1])
        price_ok = price[pmask].min(initial=0.0) > -1e-8 * (1 + np.abs(price).max(initial=0.0))
    if resid <= 1e-9 * (1 + np.abs(b_eq).max(initial=0.0)) and neg <= 1e-9 and price_ok:
        v = vref
        v[m:][np.abs(v[m:]) <= 1e-13] = 0.0
        v[m:] = np.maximum(v[m:], 0.0)

    pi = v[sl["pi"]]
    theta_y = np.zeros(view.n_y)
    theta_y[fin_y] = v[sl["th_y"]]
    theta_w = np.zeros(view.n_w)
    theta_w[fin_w] = v[sl["th_w"]]
    return pi, v[sl["mu_y"]], v[sl["mu_w"]], theta_y, theta_w, multiple


def follower_kkt_point(problem: BilevelSpeProblem, x, require_nonneg_prices: bool = True):
    """Full clean follower KKT point at x, block by block.

    Returns a dict with y, w, pi0, pi1, mu_y, mu_w, theta_y, theta_w,
    multiplicity flag, and the per-block primal/dual objective lists.
    Raises NegativePriceError when no price selection satisfies the mask.
    """
    x = _check_x(problem, x)
    out = {k: np.zeros(n) for k, n in [
        ("y", problem.n_y), ("w", problem.n_w), ("mu_y", problem.n_y),
        ("mu_w", problem.n_w), ("theta_y", problem.n_y), ("theta_w", problem.n_w)]}
    out["pi0"] = np.zeros(problem.m0)
    out["pi1"] = np.zeros(problem.m1)
    multiple = False
    for blk in problem.blocks:
        view = _View(problem, blk)
        primal = solve_follower_primal(problem, x, block=blk)
        got = _face_duals(view, x, primal.y, primal.w, require_nonneg_prices)
        if got is None and require_nonneg_prices:
            loose = _face_duals(view, x, primal.y, primal.w, False)
            pi = loose[0] if loose is not None else None
            raise NegativePriceError(
                "no nonnegative equilibrium price selection exists at this x",
                pi0=None if pi is None else pi[:view.m0],
                pi1=None if pi is None else pi[view.m0:])
        if got is None:
            raise FollowerInfeasible("dual face selection failed")
        pi, mu_y, mu_w, th_y, th_w, mult = got
        multiple = multiple or mult
        out["y"][view.y_idx] = primal.y
        out["w"][view.w_idx] = primal.w
        out["pi0"][view.row0] = pi[:view.m0]
        out["pi1"][view.row1] = pi[view.m0:]
        out["mu_y"][view.y_idx] = mu_y
        out["mu_w"][view.w_idx] = mu_w
        out["theta_y"][view.y_idx] = th_y
        out["theta_w"][view.w_idx] = th_w
    out["multiple"] = multiple
    return out


def equilibrium_prices(problem: BilevelSpeProblem, x):
    """Equilibrium price map: optimistic dual selection (max revenue pi0'Dx).

    Returns (pi0, pi1, multiple).  Raises NegativePriceError when the
    price-nonnegativity mask cannot be met (bilevel infeasibility at x).
    """
    point = follower_kkt_point(problem, x, require_nonneg_prices=True)
    return point["pi0"], point["pi1"], point["multiple"]


def check_kkt(problem: BilevelSpeProblem, x, primal: FollowerPrimalSolution,
              dual: FollowerDualSolution) -> KktResidualReport:
    """Per-block max residuals of the follower KKT system at (primal, dual)."""
    p = problem
    x = np.asarray(x, dtype=float)
    y, w = primal.y, primal.w
    pi = np.concatenate([dual.pi0, dual.pi1])

    rhs = np.concatenate([p.h0 + p.x_coupling @ x, p.h1])
    Gm, Hm = p.G, p.H
    primal_eq = float(np.abs(Gm @ y + (Hm @ w if p.n_w else 0.0) - rhs).max(initial=0.0))

    lbv = np.concatenate([y, w])
    ubv = np.concatenate([p.ub_y, p.ub_w])
    over = np.where(np.isfinite(ubv), lbv - ubv, 0.0)
    primal_bounds = float(max(np.maximum(-lbv, 0.0).max(initial=0.0),
                              np.maximum(over, 0.0).max(initial=0.0)))

    dual_nonneg = float(max(
        np.maximum(-dual.mu_y, 0.0).max(initial=0.0),
        np.maximum(-dual.mu_w, 0.0).max(initial=0.0),
        np.maximum(-dual.theta_y, 0.0).max(initial=0.0),
        np.maximum(-dual.theta_w, 0.0).max(initial=0.0)))

    st_y = p.phi(y) + Gm.T @ pi + dual.theta_y - dual.mu_y
    st_w = (Hm.T @ pi + dual.theta_w - dual.mu_w) if p.n_w else np.zeros(0)
    stationarity = float(max(np.abs(st_y).max(initial=0.0), np.abs(st_w).max(initial=0.0)))

    comp = [np.abs(y * dual.mu_y).max(initial=0.0)]
    fin_y = np.isfinite(p.ub_y)
    comp.append(np.abs((p.ub_y[fin_y] - y[fin_y]) * dual.theta_y[fin_y]).max(initial=0.0))
    if p.n_w:
        comp.append(np.abs(w * dual.mu_w).max(initial=0.0))
        fin_w = np.isfinite(p.ub_w)
        comp.append(np.abs((p.ub_w[fin_w] - w[fin_w]) * dual.theta_w[fin_w]).max(initial=0.0))
    complementarity = float(max(comp))

    return KktResidualReport(primal_eq=primal_eq, primal_bounds=primal_bounds,
                             dual_nonneg=dual_nonneg, stationarity=stationarity,
                             complementarity=complementarity)

"""Relaxation-strength diagnostics.

The KKT-based relaxation keeps the bilinear revenue term; a recession
direction of its constraint system with positive revenue growth
certifies an unbounded root relaxation.  The certificate LP maximizes
the growth rate pi0~' D x_dot over the homogeneous system (finite-bound
components pinned to zero, everything nonnegative except sign-free pi1
rows) under a simplex normalization.  A positive optimum certifies
unboundedness; zero is inconclusive (the condition is sufficient only).

The Duality-based relaxation is certified bounded whenever h = 0 (the
quadratic revenue substitute is coercive since R is positive definite).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .problem import BilevelSpeProblem, partition_bounds
from .qp import OPTIMAL, QpProblem, solve_lp, solve_qp
from .reformulate import build_duality_model, build_kkt_model, build_relaxation


class InvalidWitness(ValueError):
    """Witness leader point violates the polyhedron or boxes."""


@dataclass
class UnboundedRayCertificate:
    y_ray: np.ndarray          # full length, finite-bound components zero
    w_ray: np.ndarray
    pi0_ray: np.ndarray
    pi1_ray: np.ndarray
    mu_y_ray: np.ndarray
    mu_w_ray: np.ndarray
    theta_y_ray: np.ndarray    # full length, zero off finite indices
    theta_w_ray: np.ndarray
    witness_z: np.ndarray
    witness_x: np.ndarray
    growth_rate: float         # pi0~' D x_dot, strictly positive

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, np.ndarray) else float(v))
                for k, v in self.__dict__.items()}


@dataclass
class BoundednessReport:
    status: str       # "Bounded" | "Unknown"
    reason: str


@dataclass
class GrowthSimulation:
    ok: bool
    rhos: tuple
    max_constraint_residual: float
    max_objective_error: float
    base_objective: float
    growth_rate: float


def _witness_feasible(problem, z_dot, x_dot, tol=1e-8):
    z_dot = np.asarray(z_dot, dtype=float)
    x_dot = np.asarray(x_dot, dtype=float)
    if np.any(z_dot < -tol) or np.any(z_dot > problem.ub_z + tol):
        return False
    if np.any(x_dot < -tol) or np.any(x_dot > problem.ub_x + tol):
        return False
    if problem.A_P.shape[0]:
        lhs = problem.A_P @ np.concatenate([z_dot, x_dot])
        if np.any(lhs > problem.b_P + tol * (1 + np.abs(problem.b_P))):
            return False
    return True


def default_witness(problem: BilevelSpeProblem):
    """x_dot = ub_x with z from a feasibility LP; if the box corner violates
    the leader polyhedron, fall back to the LP maximizing total x."""
    n_z, n_x = problem.n_z, problem.n_x
    n = n_z + n_x
    lb = np.zeros(n)
    ub = np.concatenate([problem.ub_z, problem.ub_x])

    x_corner = problem.ub_x
    lp = QpProblem(Q=np.zeros((n, n)), q=np.zeros(n),
                   A_in=problem.A_P if problem.A_P.size else None,
                   b_in=problem.b_P if problem.A_P.size else None,
                   lb=np.concatenate([np.zeros(n_z), x_corner]),
                   ub=np.concatenate([problem.ub_z, x_corner]))
    sol = solve_lp(lp)
    if sol.optimal:
        return sol.v[:n_z], x_corner
    lp2 = QpProblem(Q=np.zeros((n, n)),
                    q=-np.concatenate([np.zeros(n_z), np.ones(n_x)]),
                    A_in=problem.A_P if problem.A_P.size else None,
                    b_in=problem.b_P if problem.A_P.size else None,
                    lb=lb, ub=ub)
    sol2 = solve_lp(lp2)
    if not sol2.optimal:
        raise InvalidWitness("no feasible leader point exists")
    return sol2.v[:n_z], sol2.v[n_z:]


def _ray_system(problem: BilevelSpeProblem):
    """Homogeneous recession system of the relaxed constraint set, in the
    variable order (y_inf, w_inf, pi0, pi1, mu_y, mu_w, th_y_fin, th_w_fin)."""
    p = problem
    part = partition_bounds(p)
    iy, iw = part.inf_y, part.inf_w
    fy, fw = part.fin_y, part.fin_w
    sizes = [len(iy), len(iw), p.m0, p.m1, p.n_y, p.n_w, len(fy), len(fw)]
    names = ["y_inf", "w_inf", "pi0", "pi1", "mu_y", "mu_w", "th_y", "th_w"]
    sl, pos = {}, 0
    for nm, s in zip(names, sizes):
        sl[nm] = slice(pos, pos + s)
        pos += s
    n = pos

    m_rows = p.m0 + p.m1 + p.n_y + p.n_w
    A = np.zeros((m_rows, n))
    row = 0
    # flow rows on infinite-bound columns only
    A[row:row + p.m0, sl["y_inf"]] = p.G0[:, iy]
    A[row:row + p.m0, sl["w_inf"]] = p.H0[:, iw]
    row += p.m0
    A[row:row + p.m1, sl["y_inf"]] = p.G1[:, iy]
    A[row:row + p.m1, sl["w_inf"]] = p.H1[:, iw]
    row += p.m1
    # y-stationarity rows (all of them)
    A[row:row + p.n_y, sl["y_inf"]] = p.R[:, iy]
    A[row:row + p.n_y, sl["pi0"]] = p.G0.T
    A[row:row + p.n_y, sl["pi1"]] = p.G1.T
    A[row:row + p.n_y, sl["mu_y"]] = -np.eye(p.n_y)
    for k, j in enumerate(fy):
        A[row + j, sl["th_y"].start + k] = 1.0
    row += p.n_y
    # w-stationarity rows
    if p.n_w:
        A[row:row + p.n_w, sl["pi0"]] = p.H0.T
        A[row:row + p.n_w, sl["pi1"]] = p.H1.T
        A[row:row + p.n_w, sl["mu_w"]] = -np.eye(p.n_w)
        for k, j in enumerate(fw):
            A[row + j, sl["th_w"].start + k] = 1.0
    return A, sl, part, n


def find_unbounded_ray(problem: BilevelSpeProblem, witness=None
                       ) -> Optional[UnboundedRayCertificate]:
    """Certificate LP: maximize pi0~' D x_dot over the homogeneous system,
    all ray components nonnegative (sign-free pi1 rows excepted), finite
    bound components zero, simplex normalization sum <= 1.

    Returns None when the LP optimum is not positive: no certificate found,
    which is NOT a proof of boundedness.
    """
    p = problem
    if witness is None:
        z_dot, x_dot = default_witness(p)
    else:
        z_dot, x_dot = (np.asarray(witness[0], dtype=float),
                        np.asarray(witness[1], dtype=float))
        if not _witness_feasible(p, z_dot, x_dot):
            raise InvalidWitness("witness violates the leader polyhedron or boxes")

    A, sl, part, n = _ray_system(p)
    lb = np.zeros(n)
    lb[sl["pi1"]] = np.where(p.pi1_price_mask, 0.0, -np.inf)
    # normalization: sum of all components <= 1 (absolute value on free rows)
    free1 = np.where(~p.pi1_price_mask)[0]
    norm_row = np.ones(n)
    obj = np.zeros(n)
    obj[sl["pi0"]] = p.x_coupling @ x_dot
    if free1.size:
        # split sign-free pi1 entries for the normalization
        F = sl["pi1"].start + free1
        A = np.hstack([A, -A[:, F]])
        norm_row = np.concatenate([norm_row, np.ones(len(F))])
        obj = np.concatenate([obj, -obj[F]])
        lb = np.concatenate([np.maximum(lb, 0.0), np.zeros(len(F))])
    lp = QpProblem(Q=np.zeros((len(obj), len(obj))), q=-obj,
                   A_eq=A, b_eq=np.zeros(A.shape[0]),
                   A_in=norm_row.reshape(1, -1), b_in=np.array([1.0]),
                   lb=lb)
    sol = solve_lp(lp)
    if not sol.optimal:
        return None
    growth = float(obj @ sol.v)
    if growth <= 1e-6:
        return None
    v = sol.v[:n].copy()
    if free1.size:
        v[sl["pi1"].start + free1] -= sol.v[n:]

    y_ray = np.zeros(p.n_y)
    y_ray[part.inf_y] = v[sl["y_inf"]]
    w_ray = np.zeros(p.n_w)
    w_ray[part.inf_w] = v[sl["w_inf"]]
    th_y = np.zeros(p.n_y)
    th_y[part.fin_y] = v[sl["th_y"]]
    th_w = np.zeros(p.n_w)
    th_w[part.fin_w] = v[sl["th_w"]]
    cert = UnboundedRayCertificate(
        y_ray=y_ray, w_ray=w_ray,
        pi0_ray=v[sl["pi0"]], pi1_ray=v[sl["pi1"]],
        mu_y_ray=v[sl["mu_y"]], mu_w_ray=v[sl["mu_w"]],
        theta_y_ray=th_y, theta_w_ray=th_w,
        witness_z=z_dot, witness_x=x_dot, growth_rate=growth)
    ok, _ = validate_certificate(p, cert)
    return cert if ok else None


def validate_certificate(problem: BilevelSpeProblem, cert: UnboundedRayCertificate,
                         tol: float = 1e-8):
    """Check a (possibly externally supplied) ray certificate: homogeneous
    system residual, nonnegativity, finite components zero, positive growth."""
    p = problem
    part = partition_bounds(p)
    failures = []
    if np.abs(cert.y_ray[part.fin_y]).max(initial=0.0) > tol:
        failures.append("finite-bound y components of the ray must be zero")
    if np.abs(cert.w_ray[part.fin_w]).max(initial=0.0) > tol:
        failures.append("finite-bound w components of the ray must be zero")
    pi = np.concatenate([cert.pi0_ray, cert.pi1_ray])
    nonneg = np.concatenate([
        cert.y_ray, cert.w_ray, cert.pi0_ray, cert.pi1_ray[p.pi1_price_mask],
        cert.mu_y_ray, cert.mu_w_ray, cert.theta_y_ray, cert.theta_w_ray])
    if nonneg.size and nonneg.min(initial=0.0) < -1e-10:
        failures.append("ray components must be nonnegative")
    scale = 1 + np.abs(np.concatenate([cert.y_ray, pi, cert.mu_y_ray])).max(initial=0.0)
    res1 = p.G0 @ cert.y_ray + (p.H0 @ cert.w_ray if p.n_w else 0.0)
    res2 = p.G1 @ cert.y_ray + (p.H1 @ cert.w_ray if p.n_w else 0.0)
    res3 = p.R @ cert.y_ray + p.G.T @ pi - cert.mu_y_ray + cert.theta_y_ray
    worst = max(np.abs(res1).max(initial=0.0), np.abs(res2).max(initial=0.0),
                np.abs(res3).max(initial=0.0))
    if p.n_w:
        res4 = p.H.T @ pi - cert.mu_w_ray + cert.theta_w_ray
        worst = max(worst, np.abs(res4).max(initial=0.0))
    if worst > tol * scale:
        failures.append(f"homogeneous system residual {worst:.3e}")
    growth = float(cert.pi0_ray @ (p.x_coupling @ cert.witness_x))
    if growth <= 1e-6:
        failures.append(f"growth rate {growth:.3e} not positive")
    return (not failures), failures


def simulate_growth(problem: BilevelSpeProblem, cert: UnboundedRayCertificate,
                    rhos=(1.0, 10.0, 100.0), tol: float = 1e-6) -> GrowthSimulation:
    """Walk the rho-family: base relaxation-feasible point at the witness plus
    rho times the ray; the KKT objective must grow affinely at the certified
    rate while all relaxed constraints stay satisfied."""
    kkt = build_kkt_model(problem)
    dual = build_duality_model(problem)
    base_qp = build_relaxation(dual)   # same constraint set, convex objective
    lb = base_qp.lb.copy()
    ub = base_qp.ub.copy()
    zsl, xsl = kkt.slices["z"], kkt.slices["x"]
    lb[zsl] = ub[zsl] = np.clip(cert.witness_z, 0.0, problem.ub_z)
    lb[xsl] = ub[xsl] = np.clip(cert.witness_x, 0.0, problem.ub_x)
    feas = QpProblem(Q=np.eye(kkt.n), q=np.zeros(kkt.n),
                     A_eq=base_qp.A_eq, b_eq=base_qp.b_eq,
                     A_in=base_qp.A_in, b_in=base_qp.b_in, lb=lb, ub=ub)
    sol = solve_qp(feas)
    if sol.status != OPTIMAL:
        return GrowthSimulation(ok=False, rhos=tuple(rhos),
                                max_constraint_residual=np.inf,
                                max_objective_error=np.inf,
                                base_objective=np.nan,
                                growth_rate=cert.growth_rate)
    base = sol.v
    ray = kkt.pack(y=cert.y_ray, w=cert.w_ray, pi0=cert.pi0_ray, pi1=cert.pi1_ray,
                   mu_y=cert.mu_y_ray, mu_w=cert.mu_w_ray,
                   th_y=cert.theta_y_ray, th_w=cert.theta_w_ray)
    obj0 = kkt.objective_value(base)
    worst_res, worst_obj = 0.0, 0.0
    for rho in rhos:
        v = base + rho * ray
        rep = kkt.feasibility_report(v)
        res = max(rep["eq"], rep["ineq"], rep["lb"], rep["ub"])
        scale = 1 + abs(obj0) + rho * abs(cert.growth_rate)
        err = abs(kkt.objective_value(v) - (obj0 + rho * cert.growth_rate)) / scale
        worst_res = max(worst_res, res / (1 + rho))
        worst_obj = max(worst_obj, err)
    return GrowthSimulation(ok=(worst_res <= tol and worst_obj <= tol),
                            rhos=tuple(rhos), max_constraint_residual=worst_res,
                            max_objective_error=worst_obj, base_objective=obj0,
                            growth_rate=cert.growth_rate)


def check_duality_bounded(problem: BilevelSpeProblem) -> BoundednessReport:
    """Sufficient boundedness certificate for the Duality relaxation."""
    if np.abs(problem.h).max(initial=0.0) <= 1e-12:
        return BoundednessReport(
            status="Bounded",
            reason="h = 0 and <Phi(y),y> coercive (R positive definite)")
    return BoundednessReport(
        status="Unknown",
        reason="h != 0: the sufficient condition does not apply")

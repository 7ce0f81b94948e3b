"""Self-contained dense convex QP/LP solver.

Mehrotra predictor-corrector interior point on the standardized form

    minimize    0.5 v'Qv + q'v
    subject to  A_eq v  = b_eq
                A_in v <= b_in
                lb <= v <= ub        (entries may be -inf / +inf)

Status classification is exact for the convex case:

* the main solve converges        -> Optimal (KKT residuals checked),
* elastic feasibility LP positive -> Infeasible (Farkas-type certificate),
* recession LP negative           -> Unbounded (feasible ray certificate),
* anything else                   -> NumericalFailure.

Both auxiliary problems are always feasible and bounded, so they never
need status detection themselves.  No randomized pivoting anywhere;
identical inputs produce identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
UNBOUNDED = "Unbounded"
NUMERICAL_FAILURE = "NumericalFailure"

_FEAS_TOL = 1e-8
_RAY_TOL = 1e-7


@dataclass
class QpProblem:
    """Convex QP in standard form. Q must be symmetric PSD unless nonconvex=True."""

    Q: np.ndarray
    q: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[np.ndarray] = None
    b_in: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    nonconvex: bool = False
    trusted: bool = False     # skip the O(n^3) PSD check (internally built)

    def __post_init__(self):
        n = len(self.q)
        self.q = np.asarray(self.q, dtype=float)
        self.Q = np.asarray(self.Q, dtype=float)
        if self.Q.shape != (n, n):
            raise ValueError(f"Q has shape {self.Q.shape}, expected {(n, n)}")
        if self.A_eq is None:
            self.A_eq = np.zeros((0, n))
            self.b_eq = np.zeros(0)
        if self.A_in is None:
            self.A_in = np.zeros((0, n))
            self.b_in = np.zeros(0)
        self.A_eq = np.asarray(self.A_eq, dtype=float)
        self.A_in = np.asarray(self.A_in, dtype=float)
        if self.A_eq.size == 0:
            self.A_eq = self.A_eq.reshape(len(np.ravel(self.b_eq)), n)
        if self.A_in.size == 0:
            self.A_in = self.A_in.reshape(len(np.ravel(self.b_in)), n)
        self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        self.b_in = np.asarray(self.b_in, dtype=float).ravel()
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).copy()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).copy()

    @property
    def n(self) -> int:
        return len(self.q)

    def validate(self) -> list[str]:
        """Invariant check; returns list of violation messages."""
        bad = []
        if not np.allclose(self.Q, self.Q.T, atol=1e-9):
            bad.append("Q not symmetric")
        elif not self.nonconvex and self.n:
            w = np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T))
            shift = 1e-10 * max(1.0, float(np.abs(w).max()))
            if w.min() < -shift:
                bad.append(f"Q not PSD (min eigenvalue {w.min():.3e})")
        if self.b_eq.size and not np.all(np.isfinite(self.b_eq)):
            bad.append("b_eq not finite")
        if self.b_in.size and not np.all(np.isfinite(self.b_in)):
            bad.append("b_in not finite")
        if np.any(self.lb > self.ub):
            bad.append("lb > ub for some variable")
        if self.A_eq.shape[0] != self.b_eq.size or self.A_in.shape[0] != self.b_in.size:
            bad.append("constraint row/rhs count mismatch")
        return bad

    def objective(self, v: np.ndarray) -> float:
        return float(0.5 * v @ self.Q @ v + self.q @ v)


@dataclass
class QpSolution:
    status: str
    v: Optional[np.ndarray] = None
    objective: Optional[float] = None
    y_eq: Optional[np.ndarray] = None        # equality duals (L = f + y'(Av-b))
    y_in: Optional[np.ndarray] = None        # inequality duals, >= 0
    z_lb: Optional[np.ndarray] = None        # lower bound multipliers, >= 0
    z_ub: Optional[np.ndarray] = None        # upper bound multipliers, >= 0
    ray: Optional[np.ndarray] = None         # recession direction when Unbounded
    farkas: Optional[dict] = None            # infeasibility certificate
    iterations: int = 0
    residuals: dict = field(default_factory=dict)
    message: str = ""

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


class _Standardized:
    """Internal form: min 0.5 x'Qx + c'x, A x = b, lb <= x <= ub, with fixed
    variables presolved out, upper-only variables mirrored to lower-only, and
    fully-free variables split into differences of nonnegatives (an IPM with
    a singular Q otherwise drifts along free null-space directions)."""

    def __init__(self, qp: QpProblem):
        n, m_in = qp.n, qp.A_in.shape[0]
        self.n_orig, self.m_in = n, m_in
        N = n + m_in
        self.Q = np.zeros((N, N))
        self.Q[:n, :n] = 0.5 * (qp.Q + qp.Q.T)
        self.c = np.concatenate([qp.q, np.zeros(m_in)])
        self.A = np.block([
            [qp.A_eq, np.zeros((qp.A_eq.shape[0], m_in))],
            [qp.A_in, np.eye(m_in)],
        ]) if N else np.zeros((qp.A_eq.shape[0] + m_in, 0))
        self.b = np.concatenate([qp.b_eq, qp.b_in])
        self.lb = np.concatenate([qp.lb, np.zeros(m_in)])
        self.ub = np.concatenate([qp.ub, np.full(m_in, np.inf)])
        self.m_eq = qp.A_eq.shape[0]
        self.const = 0.0

        # presolve: pin variables with lb == ub
        fixed = np.isfinite(self.lb) & np.isfinite(self.ub) & (self.ub - self.lb <= 1e-12)
        self.fixed_mask = fixed
        self.fixed_vals = np.zeros(N)
        self.fixed_vals[fixed] = 0.5 * (self.lb[fixed] + self.ub[fixed])
        if fixed.any():
            xf = self.fixed_vals
            keep = ~fixed
            self.const = float(0.5 * xf @ self.Q @ xf + self.c @ xf)
            self.c = (self.c + self.Q @ xf)[keep]
            self.b = self.b - self.A @ xf
            self.A = self.A[:, keep]
            self.Q = self.Q[np.ix_(keep, keep)]
            self.lb = self.lb[keep]
            self.ub = self.ub[keep]
        self.keep = ~fixed
        self.N = self.Q.shape[0]

        # mirror x_i = ub_i - y_i for upper-only variables
        mirror = ~np.isfinite(self.lb) & np.isfinite(self.ub)
        self.sign = np.where(mirror, -1.0, 1.0)
        self.shift = np.where(mirror, self.ub, 0.0)
        free = ~np.isfinite(self.lb) & ~np.isfinite(self.ub)
        self.free_idx = np.where(free)[0]
        if mirror.any() or self.free_idx.size:
            k = self.shift
            Qm = (self.sign[:, None] * self.sign[None, :]) * self.Q
            cm = self.sign * (self.c + self.Q @ k)
            self.const += float(0.5 * k @ self.Q @ k + self.c @ k)
            Am = self.A * self.sign[None, :]
            bm = self.b - self.A @ k
            lbm = np.where(mirror, 0.0, self.lb)
            ubm = np.where(mirror, np.inf, self.ub)
            # split free variables: x_i = y_i - y_extra
            F = self.free_idx
            self.Qs = np.block([[Qm, -Qm[:, F]], [-Qm[F, :], Qm[np.ix_(F, F)]]]) \
                if F.size else Qm
            self.cs = np.concatenate([cm, -cm[F]])
            self.As = np.hstack([Am, -Am[:, F]]) if F.size else Am
            self.bs = bm
            self.lbs = np.concatenate([np.where(free, 0.0, lbm), np.zeros(F.size)])
            self.ubs = np.concatenate([ubm, np.full(F.size, np.inf)])
        else:
            self.Qs, self.cs, self.As, self.bs = self.Q, self.c, self.A, self.b
            self.lbs, self.ubs = self.lb, self.ub
        self.N_solve = len(self.cs)

    def unsolve(self, xs: np.ndarray) -> np.ndarray:
        """Map an IPM-space point back to the (unfixed) standardized space."""
        y = xs[:self.N].copy()
        if self.free_idx.size:
            y[self.free_idx] -= xs[self.N:]
        return self.sign * y + self.shift

    def unsolve_dir(self, ds: np.ndarray) -> np.ndarray:
        """Direction version of unsolve (no affine shift)."""
        y = ds[:self.N].copy()
        if self.free_idx.size:
            y[self.free_idx] -= ds[self.N:]
        return self.sign * y

    def lift(self, x: np.ndarray) -> np.ndarray:
        full = self.fixed_vals.copy()
        full[self.keep] = x
        return full


def _interior_start(lb, ub):
    x = np.zeros_like(lb)
    both = np.isfinite(lb) & np.isfinite(ub)
    lonly = np.isfinite(lb) & ~np.isfinite(ub)
    uonly = ~np.isfinite(lb) & np.isfinite(ub)
    width = np.full(len(lb), np.inf)
    width[both] = (ub - lb)[both]
    shift = np.minimum(np.maximum(1.0, 0.1 * np.abs(np.where(lonly | both, lb, 0.0))),
                       0.5 * width)
    x[both | lonly] = (np.where(both | lonly, lb, 0.0) + shift)[both | lonly]
    x[uonly] = ub[uonly] - np.maximum(1.0, 0.1 * np.abs(ub[uonly]))
    return x


def _starting_point(Q, c, A, b, lb, ub, L, U):
    """Least-norm equality solution clipped strictly inside the bounds, with
    bound multipliers chosen so the initial dual residual vanishes."""
    if A.shape[0]:
        x, *_ = np.linalg.lstsq(A, b, rcond=None)
    else:
        x = np.zeros(len(c))
    lo = _interior_start(lb, ub)
    fl, fu = np.isfinite(lb), np.isfinite(ub)
    width = np.full(len(c), np.inf)
    width[fl & fu] = (ub - lb)[fl & fu]
    ml = np.minimum(np.maximum(1.0, 1e-2 * np.abs(np.where(fl, lb, 0.0))), 0.4 * width)
    mu_ = np.minimum(np.maximum(1.0, 1e-2 * np.abs(np.where(fu, ub, 0.0))), 0.4 * width)
    x[fl] = np.maximum(x, lb + ml)[fl]
    x[fu] = np.minimum(x, np.where(fu, ub, 0.0) - mu_)[fu]
    x[fl & (x < lb)] = lo[fl & (x < lb)]
    grad = Q @ x + c
    z = np.maximum(grad[L], 1.0)
    s = np.maximum(-grad[U], 1.0)
    return x, np.zeros(A.shape[0]), z, s


def _ipm(Q, c, A, b, lb, ub, max_iter=200, tol=1e-10, accept_tol=1e-8, delta=1e-9):
    """Core Mehrotra predictor-corrector. Returns (ok, x, lam, z, s, iters, res)."""
    N = len(c)
    m = A.shape[0]
    L = np.where(np.isfinite(lb))[0]
    U = np.where(np.isfinite(ub))[0]

    if N == 0:
        return True, np.zeros(0), np.zeros(m), np.zeros(0), np.zeros(0), 0, {"rp": 0.0, "rd": 0.0, "gap": 0.0}

    if len(L) == 0 and len(U) == 0:
        # equality-constrained QP: direct KKT solve
        K = np.block([[Q + delta * np.eye(N), A.T], [A, -delta * np.eye(m)]]) if m else Q + delta * np.eye(N)
        rhs = np.concatenate([-c, b]) if m else -c
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        x, lam = sol[:N], sol[N:]
        rd = Q @ x + c + (A.T @ lam if m else 0.0)
        rp = A @ x - b if m else np.zeros(0)
        res = {
            "rp": float(np.abs(rp).max() / (1 + np.abs(b).max(initial=0.0))) if m else 0.0,
            "rd": float(np.abs(rd).max() / (1 + np.abs(c).max(initial=0.0))),
            "gap": 0.0,
        }
        ok = res["rp"] <= accept_tol and res["rd"] <= accept_tol
        return ok, x, lam, np.zeros(0), np.zeros(0), 1, res

    x, lam, z, s = _starting_point(Q, c, A, b, lb, ub, L, U)

    bnorm = 1.0 + (np.abs(b).max() if m else 0.0)
    cnorm = 1.0 + np.abs(c).max(initial=0.0)
    nLU = len(L) + len(U)
    eyeN = np.eye(N)
    best = None

    for it in range(1, max_iter + 1):
        g = x[L] - lb[L]
        t = ub[U] - x[U]
        rd = Q @ x + c + (A.T @ lam if m else 0.0)
        rd[L] -= z
        rd[U] += s
        rp = A @ x - b if m else np.zeros(0)
        mu = (g @ z + t @ s) / nLU
        obj = 0.5 * x @ Q @ x + c @ x

        rp_rel = float(np.abs(rp).max() / bnorm) if m else 0.0
        rd_rel = float(np.abs(rd).max() / (cnorm + np.abs(Q @ x).max(initial=0.0)))
        gap_rel = float((g @ z + t @ s) / (1.0 + abs(obj)))
        res = {"rp": rp_rel, "rd": rd_rel, "gap": gap_rel}
        if best is None or max(rp_rel, rd_rel, gap_rel) < best[0]:
            best = (max(rp_rel, rd_rel, gap_rel), x.copy(), lam.copy(), z.copy(), s.copy(), it, dict(res))
        if rp_rel <= tol and rd_rel <= tol and gap_rel <= tol:
            return True, x, lam, z, s, it, res
        if np.abs(x).max() > 1e12 or not np.isfinite(mu):
            break
        if (g.size and g.min() < 1e-250) or (t.size and t.min() < 1e-250):
            break

        D = np.zeros(N)
        np.add.at(D, L, z / g)
        np.add.at(D, U, s / t)
        K = np.empty((N + m, N + m))
        K[:N, :N] = Q + np.diag(D) + delta * eyeN
        if m:
            K[:N, N:] = A.T
            K[N:, :N] = A
            K[N:, N:] = -delta * np.eye(m)
        try:
            lu = sla.lu_factor(K)
        except (np.linalg.LinAlgError, ValueError):
            break

        def solve_dir(rcz, rcs):
            rhs1 = -rd.copy()
            rhs1[L] -= rcz / g
            rhs1[U] += rcs / t
            rhs = np.concatenate([rhs1, -rp])
            d = sla.lu_solve(lu, rhs)
            dx, dlam = d[:N], d[N:]
            dz = -(rcz + z * dx[L]) / g
            ds = -(rcs - s * dx[U]) / t
            return dx, dlam, dz, ds

        def steplen(dx, dz, ds):
            ap = 1.0
            dg = dx[L]
            dt = -dx[U]
            neg = dg < 0
            if neg.any():
                ap = min(ap, float((-g[neg] / dg[neg]).min()))
            neg = dt < 0
            if neg.any():
                ap = min(ap, float((-t[neg] / dt[neg]).min()))
            ad = 1.0
            neg = dz < 0
            if neg.any():
                ad = min(ad, float((-z[neg] / dz[neg]).min()))
            neg = ds < 0
            if neg.any():
                ad = min(ad, float((-s[neg] / ds[neg]).min()))
            return ap, ad

        # predictor
        dx_a, dlam_a, dz_a, ds_a = solve_dir(g * z, t * s)
        ap, ad = steplen(dx_a, dz_a, ds_a)
        mu_aff = ((g + ap * dx_a[L]) @ (z + ad * dz_a) + (t - ap * dx_a[U]) @ (s + ad * ds_a)) / nLU
        sigma = min(1.0 - 1e-8, max(1e-8, (max(mu_aff, 0.0) / mu) ** 3)) if mu > 0 else 1e-8

        # corrector
        rcz = g * z + dx_a[L] * dz_a - sigma * mu
        rcs = t * s - dx_a[U] * ds_a - sigma * mu
        dx, dlam, dz, ds = solve_dir(rcz, rcs)
        ap, ad = steplen(dx, dz, ds)
        alpha = 0.99 * min(ap, ad)
        if alpha <= 1e-14:
            break
        x = x + alpha * dx
        lam = lam + alpha * dlam
        z = z + alpha * dz
        s = s + alpha * ds

    # fall back to best iterate if it meets the acceptance tolerance
    if best is not None and best[0] <= accept_tol:
        _, x, lam, z, s, it, res = best
        return True, x, lam, z, s, it, res
    if best is not None:
        _, x, lam, z, s, it, res = best
        return False, x, lam, z, s, it, res
    return False, x, lam, z, s, 0, {"rp": np.inf, "rd": np.inf, "gap": np.inf}


def _elastic_feasibility(std: _Standardized):
    """min 1'(p+n) s.t. Ax + p - n = b; always feasible and bounded."""
    N, m = std.N_solve, std.As.shape[0]
    if m == 0:
        return 0.0, np.zeros(0), None
    A = np.hstack([std.As, np.eye(m), -np.eye(m)])
    c = np.concatenate([np.zeros(N), np.ones(2 * m)])
    lb = np.concatenate([std.lbs, np.zeros(2 * m)])
    ub = np.concatenate([std.ubs, np.full(2 * m, np.inf)])
    ok, xe, lam, _, _, _, _ = _ipm(np.zeros((N + 2 * m, N + 2 * m)), c, A, std.bs, lb, ub)
    if not ok:
        return None, None, None
    val = float(c @ xe)
    return val, lam, std.unsolve(xe[:N])


def _recession_lp(std: _Standardized):
    """min c'd over the recession cone of the feasible set, with Qd = 0, |d| <= 1."""
    N = std.N_solve
    nzQ = np.where(np.abs(std.Qs).max(axis=1, initial=0.0) > 0)[0]
    A = np.vstack([std.As, std.Qs[nzQ]]) if len(nzQ) else std.As
    b = np.zeros(A.shape[0])
    # after standardization every variable has a finite lower bound unless the
    # whole problem is bound-free (handled by the direct path upstream)
    lb = np.zeros(N)
    ub = np.where(np.isfinite(std.ubs), 0.0, 1.0)
    ok, d, *_ = _ipm(np.zeros((N, N)), std.cs, A, b, lb, ub)
    if not ok:
        return None, None
    return float(std.cs @ d), std.unsolve_dir(d)


def _polish_ray(std: _Standardized, d: np.ndarray) -> np.ndarray:
    """Round tiny ray components to exact zero while keeping cone membership."""
    d = d.copy()
    d[np.abs(d) < 1e-10] = 0.0
    return d


def solve_qp(qp: QpProblem, max_iter: int = 200, tol: float = 1e-10) -> QpSolution:
    """Solve a convex QP with exact status classification."""
    if qp.nonconvex:
        raise ValueError("solve_qp refuses nonconvex problems (diagnostics-only models)")
    bad = qp.validate()
    if bad:
        raise ValueError("invalid QpProblem: " + "; ".join(bad))
    if np.any(qp.lb > qp.ub + 1e-12):
        return QpSolution(status=INFEASIBLE, message="empty box")

    std = _Standardized(qp)

    # empty rows after presolve: 0 = b must hold
    if std.A.shape[0]:
        empty = np.abs(std.A).max(axis=1, initial=0.0) == 0.0
        if empty.any() and np.abs(std.b[empty]).max() > _FEAS_TOL:
            lam = np.zeros(std.A.shape[0])
            i = int(np.where(empty & (np.abs(std.b) > _FEAS_TOL))[0][0])
            lam[i] = np.sign(std.b[i])
            return QpSolution(status=INFEASIBLE, farkas={"y": lam, "margin": float(abs(std.b[i]))},
                              message="inconsistent empty row")

    ok, xs, lam, _, _, iters, res = _ipm(std.Qs, std.cs, std.As, std.bs, std.lbs, std.ubs,
                                         max_iter=max_iter, tol=tol)
    if not ok:
        feas_val, feas_lam, _ = _elastic_feasibility(std)
        if feas_val is None:
            return QpSolution(status=NUMERICAL_FAILURE, iterations=iters, residuals=res,
                              message="elastic feasibility solve failed")
        scale = 1.0 + (np.abs(std.bs).max() if std.bs.size else 0.0)
        if feas_val > _FEAS_TOL * scale:
            return QpSolution(status=INFEASIBLE, iterations=iters, residuals=res,
                              farkas={"y": feas_lam, "margin": feas_val},
                              message=f"elastic infeasibility {feas_val:.3e}")
        ray_val, d = _recession_lp(std)
        if ray_val is not None and ray_val < -_RAY_TOL * (1.0 + np.abs(std.cs).max(initial=0.0)):
            full = np.zeros(std.fixed_mask.size)
            full[std.keep] = _polish_ray(std, d)
            return QpSolution(status=UNBOUNDED, ray=full[:std.n_orig], iterations=iters,
                              residuals=res, message=f"recession descent {ray_val:.3e}")
        # retry once with heavier regularization before giving up
        ok, xs, lam, _, _, iters2, res = _ipm(std.Qs, std.cs, std.As, std.bs,
                                              std.lbs, std.ubs,
                                              max_iter=max_iter, tol=1e-9, delta=1e-7)
        iters += iters2
        if not ok:
            return QpSolution(status=NUMERICAL_FAILURE, iterations=iters, residuals=res,
                              message="IPM did not converge")

    xfull = std.lift(std.unsolve(xs))
    v = xfull[:std.n_orig]
    m_eq = std.m_eq
    # bound multipliers reconstructed from the stationarity gradient
    grad = qp.Q @ v + qp.q
    if qp.A_eq.shape[0]:
        grad = grad + qp.A_eq.T @ lam[:m_eq]
    if qp.A_in.shape[0]:
        grad = grad + qp.A_in.T @ lam[m_eq:]
    z_lb = np.where(np.isfinite(qp.lb), np.maximum(grad, 0.0), 0.0)
    z_ub = np.where(np.isfinite(qp.ub), np.maximum(-grad, 0.0), 0.0)
    sol = QpSolution(
        status=OPTIMAL,
        v=v,
        objective=qp.objective(v),
        y_eq=lam[:m_eq],
        y_in=lam[m_eq:],
        z_lb=z_lb,
        z_ub=z_ub,
        iterations=iters,
        residuals=res,
    )
    return sol


def solve_lp(lp: QpProblem, **kw) -> QpSolution:
    """LP entry point (Q = 0 fast path shares the same machinery)."""
    if np.abs(lp.Q).max(initial=0.0) != 0.0:
        raise ValueError("solve_lp expects Q = 0")
    return solve_qp(lp, **kw)


def kkt_residuals(qp: QpProblem, sol: QpSolution) -> dict:
    """Primal/dual/complementarity residuals of a solution, for self-checks."""
    v = sol.v
    rp_eq = float(np.abs(qp.A_eq @ v - qp.b_eq).max(initial=0.0))
    rp_in = float(np.maximum(qp.A_in @ v - qp.b_in, 0.0).max(initial=0.0))
    lbv = np.where(np.isfinite(qp.lb), qp.lb, v)
    ubv = np.where(np.isfinite(qp.ub), qp.ub, v)
    rp_box = float(max(np.maximum(lbv - v, 0.0).max(initial=0.0),
                       np.maximum(v - ubv, 0.0).max(initial=0.0)))
    grad = qp.Q @ v + qp.q
    if qp.A_eq.shape[0]:
        grad = grad + qp.A_eq.T @ sol.y_eq
    if qp.A_in.shape[0]:
        grad = grad + qp.A_in.T @ sol.y_in
    grad = grad - sol.z_lb + sol.z_ub
    rd = float(np.abs(grad).max(initial=0.0))
    comp = 0.0
    if qp.A_in.shape[0]:
        comp = max(comp, float(np.abs(sol.y_in * (qp.b_in - qp.A_in @ v)).max(initial=0.0)))
    g = np.where(np.isfinite(qp.lb), v - qp.lb, 0.0)
    t = np.where(np.isfinite(qp.ub), qp.ub - v, 0.0)
    comp = max(comp, float(np.abs(sol.z_lb * g).max(initial=0.0)),
               float(np.abs(sol.z_ub * t).max(initial=0.0)))
    return {"primal_eq": rp_eq, "primal_in": rp_in, "primal_box": rp_box,
            "dual": rd, "complementarity": comp}

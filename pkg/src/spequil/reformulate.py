"""Single-level reformulations of the bilevel SPE problem.

Two models over the identical constraint set (coupling and stationarity
equalities, leader polyhedron, boxes, complementarity pairs, binaries):

* KKT-based: bilinear objective pi0' D x - c_x'x - c_z'z (nonconvex),
* Duality-based: objective -y'Ry - r'y - ub_y_fin' th_y - ub_w_fin' th_w
  - h'pi - c_x'x - c_z'z, concave quadratic.

Upper-bound multipliers exist only on finite-bound indices (the
infinite-bound ones are identically zero and eliminated).  Relaxations
drop complementarity and integrality; the Duality relaxation is a convex
QP, the KKT relaxation is flagged nonconvex and never used for bounding.

Objective convention: value = v'Qv + q'v + const, maximized.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .problem import BilevelSpeProblem, partition_bounds
from .qp import QpProblem

VAR_GROUPS = ("z", "x", "y", "w", "pi0", "pi1", "mu_y", "mu_w", "th_y", "th_w")


class NotKktFeasible(Exception):
    """Point violates the single-level constraint system beyond tolerance."""


@dataclass(frozen=True)
class CompPair:
    """Complementarity pair: both sides >= 0, product must vanish.

    A side is ("var", i) with value v[i], or ("ub_slack", i) with value
    ub[i] - v[i].
    """
    a: tuple
    b: tuple

    def side_value(self, side, v, ub):
        kind, idx = side
        return v[idx] if kind == "var" else ub[idx] - v[idx]

    def values(self, v, ub):
        return self.side_value(self.a, v, ub), self.side_value(self.b, v, ub)


@dataclass
class SingleLevelModel:
    kind: str                   # "kkt" or "duality"
    problem: BilevelSpeProblem
    slices: dict                # group name -> slice into the variable vector
    names: list
    n: int
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    binary_idx: np.ndarray
    pairs: list
    Q: np.ndarray
    q: np.ndarray
    const: float
    nonconvex: bool
    fin_y: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    fin_w: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def objective_value(self, v: np.ndarray) -> float:
        return float(v @ self.Q @ v + self.q @ v + self.const)

    def pack(self, **groups) -> np.ndarray:
        """Assemble a full variable vector from named group arrays.

        th_y / th_w accept full-length arrays (restricted to finite indices).
        """
        v = np.zeros(self.n)
        for name, val in groups.items():
            val = np.asarray(val, dtype=float).ravel()
            sl = self.slices[name]
            if name == "th_y" and len(val) == self.problem.n_y:
                val = val[self.fin_y]
            if name == "th_w" and len(val) == self.problem.n_w:
                val = val[self.fin_w]
            if len(val) != sl.stop - sl.start:
                raise ValueError(f"group {name}: length {len(val)} != {sl.stop - sl.start}")
            v[sl] = val
        return v

    def unpack(self, v: np.ndarray) -> dict:
        return {name: v[sl].copy() for name, sl in self.slices.items()}

    def feasibility_report(self, v: np.ndarray) -> dict:
        """Max violations per constraint class at point v."""
        eq = float(np.abs(self.A_eq @ v - self.b_eq).max(initial=0.0))
        ineq = float(np.maximum(self.A_in @ v - self.b_in, 0.0).max(initial=0.0)) \
            if self.A_in.shape[0] else 0.0
        lo = float(np.maximum(self.lb - v, 0.0).max(initial=0.0))
        hiv = np.where(np.isfinite(self.ub), v - self.ub, 0.0)
        hi = float(np.maximum(hiv, 0.0).max(initial=0.0))
        comp = 0.0
        for p in self.pairs:
            a, b = p.values(v, self.ub)
            comp = max(comp, abs(a * b))
        frac = 0.0
        if self.binary_idx.size:
            zb = v[self.binary_idx]
            frac = float(np.abs(zb - np.round(zb)).max(initial=0.0))
        return {"eq": eq, "ineq": ineq, "lb": lo, "ub": hi,
                "complementarity": comp, "integrality": frac}

    def max_violation(self, v: np.ndarray) -> float:
        return max(self.feasibility_report(v).values())


def _catalog(p: BilevelSpeProblem):
    part = partition_bounds(p)
    sizes = {
        "z": p.n_z, "x": p.n_x, "y": p.n_y, "w": p.n_w,
        "pi0": p.m0, "pi1": p.m1, "mu_y": p.n_y, "mu_w": p.n_w,
        "th_y": len(part.fin_y), "th_w": len(part.fin_w),
    }
    slices, names, pos = {}, [], 0
    for g in VAR_GROUPS:
        slices[g] = slice(pos, pos + sizes[g])
        if g == "th_y":
            names.extend(f"th_y{j}" for j in part.fin_y)
        elif g == "th_w":
            names.extend(f"th_w{j}" for j in part.fin_w)
        else:
            names.extend(f"{g}{j}" for j in range(sizes[g]))
        pos += sizes[g]
    return slices, names, pos, part


def _build_base(p: BilevelSpeProblem):
    """Constraint system shared verbatim by both formulations."""
    sl, names, n, part = _catalog(p)
    fin_y, fin_w = part.fin_y, part.fin_w

    m_eq = p.m0 + p.m1 + p.n_y + p.n_w
    A = np.zeros((m_eq, n))
    b = np.zeros(m_eq)
    row = 0
    # coupling: G0 y + H0 w - D x = h0
    A[row:row + p.m0, sl["y"]] = p.G0
    if p.n_w:
        A[row:row + p.m0, sl["w"]] = p.H0
    A[row:row + p.m0, sl["x"]] = -p.x_coupling
    b[row:row + p.m0] = p.h0
    row += p.m0
    # remaining follower equalities: G1 y + H1 w = h1
    A[row:row + p.m1, sl["y"]] = p.G1
    if p.n_w:
        A[row:row + p.m1, sl["w"]] = p.H1
    b[row:row + p.m1] = p.h1
    row += p.m1
    # y-stationarity: R y + G'pi - mu_y + th_y(fin) = -r
    A[row:row + p.n_y, sl["y"]] = p.R
    A[row:row + p.n_y, sl["pi0"]] = p.G0.T
    A[row:row + p.n_y, sl["pi1"]] = p.G1.T
    A[row:row + p.n_y, sl["mu_y"]] = -np.eye(p.n_y)
    for k, j in enumerate(fin_y):
        A[row + j, sl["th_y"].start + k] = 1.0
    b[row:row + p.n_y] = -p.r
    row += p.n_y
    # w-stationarity: H'pi - mu_w + th_w(fin) = 0
    if p.n_w:
        A[row:row + p.n_w, sl["pi0"]] = p.H0.T
        A[row:row + p.n_w, sl["pi1"]] = p.H1.T
        A[row:row + p.n_w, sl["mu_w"]] = -np.eye(p.n_w)
        for k, j in enumerate(fin_w):
            A[row + j, sl["th_w"].start + k] = 1.0
    row += p.n_w

    A_in = np.zeros((p.A_P.shape[0], n))
    if p.A_P.shape[0]:
        A_in[:, sl["z"]] = p.A_P[:, :p.n_z]
        A_in[:, sl["x"]] = p.A_P[:, p.n_z:]
    b_in = p.b_P.copy()

    lb = np.zeros(n)
    ub = np.full(n, np.inf)
    ub[sl["z"]] = p.ub_z
    ub[sl["x"]] = p.ub_x
    ub[sl["y"]] = p.ub_y
    ub[sl["w"]] = p.ub_w
    lb_pi1 = np.where(p.pi1_price_mask, 0.0, -np.inf)
    lb[sl["pi1"]] = lb_pi1

    binaries = []
    for j in range(p.n_z):
        if p.integer_mask_z[j]:
            if abs(p.ub_z[j] - 1.0) > 1e-12:
                raise ValueError("integer leader variables must be binary (ub = 1)")
            binaries.append(sl["z"].start + j)
    for j in range(p.n_x):
        if p.integer_mask_x[j]:
            if abs(p.ub_x[j] - 1.0) > 1e-12:
                raise ValueError("integer leader variables must be binary (ub = 1)")
            binaries.append(sl["x"].start + j)

    pairs = []
    for j in range(p.n_y):
        pairs.append(CompPair(("var", sl["y"].start + j), ("var", sl["mu_y"].start + j)))
    for k, j in enumerate(fin_y):
        pairs.append(CompPair(("ub_slack", sl["y"].start + j), ("var", sl["th_y"].start + k)))
    for j in range(p.n_w):
        pairs.append(CompPair(("var", sl["w"].start + j), ("var", sl["mu_w"].start + j)))
    for k, j in enumerate(fin_w):
        pairs.append(CompPair(("ub_slack", sl["w"].start + j), ("var", sl["th_w"].start + k)))

    return sl, names, n, fin_y, fin_w, A, b, A_in, b_in, lb, ub, np.array(binaries, dtype=int), pairs


def build_kkt_model(problem: BilevelSpeProblem) -> SingleLevelModel:
    """Single-level model with the bilinear revenue objective pi0'Dx - costs."""
    sl, names, n, fin_y, fin_w, A, b, A_in, b_in, lb, ub, binaries, pairs = _build_base(problem)
    Q = np.zeros((n, n))
    D = problem.x_coupling
    Q[sl["x"], sl["pi0"]] += 0.5 * D.T
    Q[sl["pi0"], sl["x"]] += 0.5 * D
    q = np.zeros(n)
    q[sl["z"]] = -problem.c_z
    q[sl["x"]] = -problem.c_x
    return SingleLevelModel(
        kind="kkt", problem=problem, slices=sl, names=names, n=n,
        A_eq=A, b_eq=b, A_in=A_in, b_in=b_in, lb=lb, ub=ub,
        binary_idx=binaries, pairs=pairs, Q=Q, q=q, const=0.0,
        nonconvex=True, fin_y=fin_y, fin_w=fin_w)


def build_duality_model(problem: BilevelSpeProblem) -> SingleLevelModel:
    """Single-level model with the strong-duality objective (concave quadratic)."""
    sl, names, n, fin_y, fin_w, A, b, A_in, b_in, lb, ub, binaries, pairs = _build_base(problem)
    p = problem
    Q = np.zeros((n, n))
    Q[sl["y"], sl["y"]] = -p.R
    q = np.zeros(n)
    q[sl["z"]] = -p.c_z
    q[sl["x"]] = -p.c_x
    q[sl["y"]] = -p.r
    q[sl["pi0"]] = -p.h0
    q[sl["pi1"]] = -p.h1
    q[sl["th_y"]] = -p.ub_y[fin_y]
    q[sl["th_w"]] = -p.ub_w[fin_w]
    return SingleLevelModel(
        kind="duality", problem=problem, slices=sl, names=names, n=n,
        A_eq=A, b_eq=b, A_in=A_in, b_in=b_in, lb=lb, ub=ub,
        binary_idx=binaries, pairs=pairs, Q=Q, q=q, const=0.0,
        nonconvex=False, fin_y=fin_y, fin_w=fin_w)


def build_relaxation(model: SingleLevelModel, fixings: Sequence = ()) -> QpProblem:
    """Relaxation: drop complementarity and integrality, apply branch fixings.

    Returned QpProblem minimizes the negated objective; recover the
    maximization value as relaxation_value(model, qp_objective).
    The KKT model yields nonconvex=True (diagnostics only, never bounds).
    """
    lb, ub = model.lb.copy(), model.ub.copy()
    for f in fixings:
        if f.kind == "binary":
            lb[f.index] = ub[f.index] = float(f.value)
        elif f.kind == "complementarity":
            pair = model.pairs[f.index]
            side = pair.a if f.side == "a" else pair.b
            skind, idx = side
            if skind == "var":
                ub[idx] = 0.0
            else:
                lb[idx] = ub[idx]
        else:
            raise ValueError(f"unknown fixing kind {f.kind!r}")
    return QpProblem(
        Q=-2.0 * model.Q, q=-model.q,
        A_eq=model.A_eq, b_eq=model.b_eq,
        A_in=model.A_in, b_in=model.b_in,
        lb=lb, ub=ub, nonconvex=model.nonconvex)


def relaxation_value(model: SingleLevelModel, qp_objective: float) -> float:
    """Maximization value from the minimizing QP objective."""
    return -qp_objective + model.const


def theorem1_gap(problem: BilevelSpeProblem, point: np.ndarray, tol: float = 1e-6) -> float:
    """|obj_KKT - obj_dual| at a point feasible for the shared constraint set.

    Raises NotKktFeasible when any constraint-class residual exceeds tol.
    """
    kkt = build_kkt_model(problem)
    dual = build_duality_model(problem)
    rep = kkt.feasibility_report(point)
    worst = max(rep.values())
    if worst > tol:
        raise NotKktFeasible(f"constraint residual {worst:.3e} exceeds {tol:.1e}: {rep}")
    return abs(kkt.objective_value(point) - dual.objective_value(point))


def constraints_signature(model: SingleLevelModel) -> str:
    """Canonical serialization hash of the constraint system (objectives excluded)."""
    hsh = hashlib.sha256()
    for arr in (model.A_eq, model.b_eq, model.A_in, model.b_in, model.lb, model.ub):
        hsh.update(np.ascontiguousarray(arr).tobytes())
    hsh.update(np.ascontiguousarray(model.binary_idx).tobytes())
    for p in model.pairs:
        hsh.update(repr((p.a, p.b)).encode())
    hsh.update(",".join(model.names).encode())
    return hsh.hexdigest()


def model_to_text(model: SingleLevelModel) -> str:
    """Plain-text dump.  Grammar (one record per line):

        MODEL <kind> VARS <n>
        VAR <i> <name> <lb> <ub> [BINARY]
        OBJ MAX
        QUAD <i> <j> <coef>        objective term coef*v_i*v_j
        LIN <i> <coef>             objective term coef*v_i
        CONST <value>
        EQ <k>: <coef>*<name> ... == <rhs>
        INEQ <k>: <coef>*<name> ... <= <rhs>
        PAIR <k>: <side> _|_ <side>   side = <name> | (ub - <name>)
    """
    out = [f"MODEL {model.kind} VARS {model.n}"]
    for i, name in enumerate(model.names):
        tag = " BINARY" if i in set(model.binary_idx.tolist()) else ""
        out.append(f"VAR {i} {name} {model.lb[i]:.17g} {model.ub[i]:.17g}{tag}")
    out.append("OBJ MAX")
    ii, jj = np.nonzero(model.Q)
    for i, j in zip(ii, jj):
        out.append(f"QUAD {i} {j} {model.Q[i, j]:.17g}")
    for i in np.nonzero(model.q)[0]:
        out.append(f"LIN {i} {model.q[i]:.17g}")
    out.append(f"CONST {model.const:.17g}")

    def terms(rowvec):
        nz = np.nonzero(rowvec)[0]
        return " + ".join(f"{rowvec[i]:.17g}*{model.names[i]}" for i in nz) or "0"

    for k in range(model.A_eq.shape[0]):
        out.append(f"EQ {k}: {terms(model.A_eq[k])} == {model.b_eq[k]:.17g}")
    for k in range(model.A_in.shape[0]):
        out.append(f"INEQ {k}: {terms(model.A_in[k])} <= {model.b_in[k]:.17g}")

    def side_txt(side):
        kind, idx = side
        return model.names[idx] if kind == "var" else f"(ub - {model.names[idx]})"

    for k, p in enumerate(model.pairs):
        out.append(f"PAIR {k}: {side_txt(p.a)} _|_ {side_txt(p.b)}")
    return "\n".join(out) + "\n"

"""Bilevel SPE problem data model and standing-assumption validation.

The leader holds mixed-binary decisions (z, x) in a polyhedron with finite
boxes; the follower is a variational inequality with affine cost
Phi(y) = R y + r (R symmetric positive definite) over the polyhedron

    G0 y + H0 w - D x = h0     [pi0]
    G1 y + H1 w       = h1     [pi1]
    0 <= y <= ub_y, 0 <= w <= ub_w   (upper bounds may be +inf)

D is the leader-coupling matrix (identity in the plain single-follower
case; stacked scaled identities for sample-averaged problems).  The
leader's revenue term is pi0' D x.  pi1 rows may individually be exempt
from the price-nonnegativity requirement (sign-free loop duals).

Instances are immutable after construction (arrays are frozen) and safe
to share across parallel workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


def _arr(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    return out


@dataclass(frozen=True)
class FollowerBlock:
    """Index ranges of one follower copy inside a stacked (sample-averaged) problem."""

    y_idx: np.ndarray       # indices into the y block
    w_idx: np.ndarray       # indices into the w block
    row0_idx: np.ndarray    # indices into the coupling (pi0) rows
    row1_idx: np.ndarray    # indices into the pi1 rows
    weight: float = 1.0     # averaging weight carried by this block's VI cost


@dataclass(frozen=True)
class BilevelSpeProblem:
    c_z: np.ndarray
    c_x: np.ndarray
    ub_z: np.ndarray
    ub_x: np.ndarray
    integer_mask_z: np.ndarray
    integer_mask_x: np.ndarray
    A_P: np.ndarray                 # leader polyhedron rows over (z, x)
    b_P: np.ndarray
    G0: np.ndarray
    G1: np.ndarray
    H0: np.ndarray
    H1: np.ndarray
    h0: np.ndarray
    h1: np.ndarray
    ub_y: np.ndarray
    ub_w: np.ndarray
    R: np.ndarray
    r: np.ndarray
    x_coupling: Optional[np.ndarray] = None     # D, default identity (m0 == n_x)
    pi1_price_mask: Optional[np.ndarray] = None  # True rows require pi1 >= 0
    blocks: Optional[tuple] = None               # FollowerBlock tuple, default single block

    def __post_init__(self):
        conv = {
            "c_z": _arr(self.c_z), "c_x": _arr(self.c_x),
            "ub_z": _arr(self.ub_z), "ub_x": _arr(self.ub_x),
            "integer_mask_z": _arr(self.integer_mask_z, bool),
            "integer_mask_x": _arr(self.integer_mask_x, bool),
            "A_P": np.atleast_2d(_arr(self.A_P)), "b_P": _arr(self.b_P),
            "G0": np.atleast_2d(_arr(self.G0)), "G1": np.atleast_2d(_arr(self.G1)),
            "H0": np.atleast_2d(_arr(self.H0)), "H1": np.atleast_2d(_arr(self.H1)),
            "h0": _arr(self.h0), "h1": _arr(self.h1),
            "ub_y": _arr(self.ub_y), "ub_w": _arr(self.ub_w),
            "R": np.atleast_2d(_arr(self.R)), "r": _arr(self.r),
        }
        for k, v in conv.items():
            object.__setattr__(self, k, v)
        if self.x_coupling is None:
            object.__setattr__(self, "x_coupling", np.eye(len(self.h0), len(self.c_x)))
        else:
            object.__setattr__(self, "x_coupling", np.atleast_2d(_arr(self.x_coupling)))
        if self.pi1_price_mask is None:
            object.__setattr__(self, "pi1_price_mask", np.ones(len(self.h1), dtype=bool))
        else:
            object.__setattr__(self, "pi1_price_mask", _arr(self.pi1_price_mask, bool))
        if self.blocks is None:
            blk = FollowerBlock(
                y_idx=np.arange(self.n_y), w_idx=np.arange(self.n_w),
                row0_idx=np.arange(self.m0), row1_idx=np.arange(self.m1), weight=1.0)
            object.__setattr__(self, "blocks", (blk,))
        else:
            object.__setattr__(self, "blocks", tuple(self.blocks))
        for k in conv:
            getattr(self, k).setflags(write=False)
        self.x_coupling.setflags(write=False)
        self.pi1_price_mask.setflags(write=False)

    # --- dimensions ---------------------------------------------------
    @property
    def n_z(self) -> int:
        return len(self.c_z)

    @property
    def n_x(self) -> int:
        return len(self.c_x)

    @property
    def n_y(self) -> int:
        return len(self.r)

    @property
    def n_w(self) -> int:
        return len(self.ub_w)

    @property
    def m0(self) -> int:
        return len(self.h0)

    @property
    def m1(self) -> int:
        return len(self.h1)

    # --- stacked follower blocks ---------------------------------------
    @property
    def G(self) -> np.ndarray:
        return np.vstack([self.G0, self.G1])

    @property
    def H(self) -> np.ndarray:
        return np.vstack([self.H0, self.H1])

    @property
    def h(self) -> np.ndarray:
        return np.concatenate([self.h0, self.h1])

    def phi(self, y: np.ndarray) -> np.ndarray:
        """VI cost map Phi(y) = R y + r."""
        return self.R @ y + self.r

    def phi_p(self, y: np.ndarray) -> float:
        """Follower primal objective 0.5 y'Ry + r'y."""
        return float(0.5 * y @ self.R @ y + self.r @ y)


@dataclass(frozen=True)
class BoundPartition:
    inf_y: np.ndarray
    fin_y: np.ndarray
    inf_w: np.ndarray
    fin_w: np.ndarray


@dataclass
class ValidationReport:
    failures: list = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.failures

    def __str__(self):
        return "valid" if self.valid else "invalid: " + "; ".join(self.failures)


def _cholesky_pd(R: np.ndarray, pivot_tol: float = 1e-10) -> bool:
    """Positive definiteness via Cholesky with a pivot tolerance."""
    if R.size == 0:
        return True
    try:
        np.linalg.cholesky(R - pivot_tol * np.eye(R.shape[0]))
        return True
    except np.linalg.LinAlgError:
        return False


def validate(problem: BilevelSpeProblem) -> ValidationReport:
    """Check the standing assumptions and dimensional consistency; report-based."""
    p = problem
    rep = ValidationReport()

    if not (np.all(np.isfinite(p.ub_z)) and np.all(p.ub_z >= 0)):
        rep.failures.append("ub_z must be finite and >= 0")
    if not (np.all(np.isfinite(p.ub_x)) and np.all(p.ub_x >= 0)):
        rep.failures.append("ub_x must be finite and >= 0")
    if np.any(np.nan_to_num(p.ub_y, nan=-1.0, posinf=1.0) < 0):
        rep.failures.append("ub_y entries must be >= 0 or +inf")
    if np.any(np.nan_to_num(p.ub_w, nan=-1.0, posinf=1.0) < 0):
        rep.failures.append("ub_w entries must be >= 0 or +inf")

    if p.R.shape != (p.n_y, p.n_y):
        rep.failures.append(f"R has shape {p.R.shape}, expected {(p.n_y, p.n_y)}")
    else:
        if not np.allclose(p.R, p.R.T, atol=1e-9):
            rep.failures.append("R not symmetric")
        if not _cholesky_pd(p.R):
            rep.failures.append("R not positive definite")

    m0, m1 = p.m0, p.m1
    for name, mat, shape in [
        ("G0", p.G0, (m0, p.n_y)), ("H0", p.H0, (m0, p.n_w)),
        ("G1", p.G1, (m1, p.n_y)), ("H1", p.H1, (m1, p.n_w)),
        ("x_coupling", p.x_coupling, (m0, p.n_x)),
    ]:
        if mat.shape != shape:
            rep.failures.append(f"{name} has shape {mat.shape}, expected {shape}")
    if np.allclose(p.x_coupling, np.eye(m0, p.n_x)) and m0 != p.n_x:
        rep.failures.append(f"identity coupling requires rows(G0) == n_x, got {m0} != {p.n_x}")

    for name, vec, n in [
        ("c_z", p.c_z, p.n_z), ("ub_z", p.ub_z, p.n_z),
        ("integer_mask_z", p.integer_mask_z, p.n_z),
        ("c_x", p.c_x, p.n_x), ("ub_x", p.ub_x, p.n_x),
        ("integer_mask_x", p.integer_mask_x, p.n_x),
        ("ub_y", p.ub_y, p.n_y), ("pi1_price_mask", p.pi1_price_mask, m1),
    ]:
        if len(vec) != n:
            rep.failures.append(f"{name} has length {len(vec)}, expected {n}")

    if p.A_P.size and p.A_P.shape[1] != p.n_z + p.n_x:
        rep.failures.append(
            f"A_P has {p.A_P.shape[1]} columns, expected n_z + n_x = {p.n_z + p.n_x}")
    if p.A_P.shape[0] != len(p.b_P):
        rep.failures.append("A_P rows and b_P length differ")

    return rep


def partition_bounds(problem: BilevelSpeProblem) -> BoundPartition:
    """Partition follower variables by infinite vs finite upper bound (ascending)."""
    inf_y = np.where(np.isinf(problem.ub_y))[0]
    fin_y = np.where(np.isfinite(problem.ub_y))[0]
    inf_w = np.where(np.isinf(problem.ub_w))[0]
    fin_w = np.where(np.isfinite(problem.ub_w))[0]
    return BoundPartition(inf_y=inf_y, fin_y=fin_y, inf_w=inf_w, fin_w=fin_w)

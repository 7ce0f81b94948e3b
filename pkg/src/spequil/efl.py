"""Equilibrium facility location on networks.

Random instance generation and the lowering to the generic bilevel SPE
form: follower variables y = (flows, demands, supplies), no w block,
h = 0, all follower upper bounds infinite.  The leader opens capacitated
facilities (binary z) and sets production x = q; its polyhedron carries
the linking rows q_i <= qbar_i z_i and the capacity budget 1'q <= q_max.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .problem import BilevelSpeProblem


@dataclass(frozen=True)
class EflInstance:
    n_nodes: int
    arcs: tuple                 # tuple of (i, j) node pairs, 0-based
    candidates: np.ndarray      # N0
    demand_nodes: np.ndarray    # Nd
    supply_nodes: np.ndarray    # Ns
    alpha0: np.ndarray          # per arc
    alpha1: np.ndarray
    beta0: np.ndarray           # per demand node
    beta1: np.ndarray
    gamma0: np.ndarray          # per supply node
    gamma1: np.ndarray
    open_cost: np.ndarray       # c_i per candidate
    unit_cost: np.ndarray       # v_i per candidate
    q_bar: np.ndarray           # capacity per candidate
    q_max: float
    seed: int = 0

    @property
    def n_arcs(self) -> int:
        return len(self.arcs)


class TooManyArcs(ValueError):
    pass


def generate_efl(n_nodes: int, n_arcs: int, seed: int) -> EflInstance:
    """Random EFL instance: uniform arcs without replacement, uniform node
    subsets of sizes floor(3n/4), floor(n/2), floor(n/2), and the cost /
    capacity distributions alpha0~U(0,3), alpha1~U(0,2), beta0~U(1300,1500),
    beta1~U(3,4), gamma0~U(1,2), gamma1~U(0,1), c~U(150,200), v~U(3,5),
    qbar~U(100,200), q_max = 350|N0|/4."""
    if n_arcs < n_nodes - 1:
        raise ValueError(f"need n_arcs >= n_nodes - 1, got {n_arcs} < {n_nodes - 1}")
    max_arcs = n_nodes * (n_nodes - 1)
    if n_arcs > max_arcs:
        raise TooManyArcs(f"{n_arcs} arcs exceed the {max_arcs} ordered pairs")
    rng = np.random.default_rng(seed)

    pair_ids = rng.choice(max_arcs, size=n_arcs, replace=False)
    arcs = []
    for pid in pair_ids:
        i = int(pid // (n_nodes - 1))
        rem = int(pid % (n_nodes - 1))
        j = rem if rem < i else rem + 1
        arcs.append((i, j))
    arcs = tuple(arcs)

    n0 = (3 * n_nodes) // 4
    nd = n_nodes // 2
    ns = n_nodes // 2
    candidates = np.sort(rng.choice(n_nodes, size=n0, replace=False))
    demand_nodes = np.sort(rng.choice(n_nodes, size=nd, replace=False))
    supply_nodes = np.sort(rng.choice(n_nodes, size=ns, replace=False))

    return EflInstance(
        n_nodes=n_nodes,
        arcs=arcs,
        candidates=candidates,
        demand_nodes=demand_nodes,
        supply_nodes=supply_nodes,
        alpha0=rng.uniform(0, 3, n_arcs),
        alpha1=rng.uniform(0, 2, n_arcs),
        beta0=rng.uniform(1300, 1500, nd),
        beta1=rng.uniform(3, 4, nd),
        gamma0=rng.uniform(1, 2, ns),
        gamma1=rng.uniform(0, 1, ns),
        open_cost=rng.uniform(150, 200, n0),
        unit_cost=rng.uniform(3, 5, n0),
        q_bar=rng.uniform(100, 200, n0),
        q_max=350.0 * n0 / 4.0,
        seed=seed,
    )


def node_arc_incidence(n_nodes: int, arcs) -> np.ndarray:
    """A[i, a] = +1 if arc a leaves node i, -1 if it enters."""
    A = np.zeros((n_nodes, len(arcs)))
    for a, (i, j) in enumerate(arcs):
        A[i, a] = 1.0
        A[j, a] = -1.0
    return A


def node_selection_incidence(n_nodes: int, subset) -> np.ndarray:
    """S[i, k] = 1 if node i equals the k-th subset member."""
    S = np.zeros((n_nodes, len(subset)))
    for k, node in enumerate(subset):
        S[node, k] = 1.0
    return S


def efl_to_bilevel(inst: EflInstance) -> BilevelSpeProblem:
    """Lower an EFL instance to the generic bilevel SPE form."""
    n = inst.n_nodes
    A_f = node_arc_incidence(n, inst.arcs)
    A_d = node_selection_incidence(n, inst.demand_nodes)
    A_s = node_selection_incidence(n, inst.supply_nodes)
    G_full = np.hstack([A_f, A_d, -A_s])

    in0 = np.asarray(inst.candidates, dtype=int)
    in1 = np.array([i for i in range(n) if i not in set(in0.tolist())], dtype=int)
    G0, G1 = G_full[in0], G_full[in1]

    n_y = inst.n_arcs + len(inst.demand_nodes) + len(inst.supply_nodes)
    R = np.diag(np.concatenate([inst.alpha1, inst.beta1, inst.gamma1]))
    r = np.concatenate([inst.alpha0, -inst.beta0, inst.gamma0])

    n0 = len(in0)
    # leader polyhedron over (z, x): linking rows x_i - qbar_i z_i <= 0, then budget
    A_P = np.zeros((n0 + 1, 2 * n0))
    b_P = np.zeros(n0 + 1)
    for k in range(n0):
        A_P[k, k] = -inst.q_bar[k]
        A_P[k, n0 + k] = 1.0
    A_P[n0, n0:] = 1.0
    b_P[n0] = inst.q_max

    return BilevelSpeProblem(
        c_z=inst.open_cost,
        c_x=inst.unit_cost,
        ub_z=np.ones(n0),
        ub_x=inst.q_bar,
        integer_mask_z=np.ones(n0, dtype=bool),
        integer_mask_x=np.zeros(n0, dtype=bool),
        A_P=A_P,
        b_P=b_P,
        G0=G0,
        G1=G1,
        H0=np.zeros((n0, 0)),
        H1=np.zeros((len(in1), 0)),
        h0=np.zeros(n0),
        h1=np.zeros(len(in1)),
        ub_y=np.full(n_y, np.inf),
        ub_w=np.zeros(0),
        R=R,
        r=r,
    )


def toy_instance(linking_coeff: float = 7.5) -> BilevelSpeProblem:
    """Two-node, one-candidate facility instance: one arc a, a demand leg b,
    and two supply legs c (at the candidate node) and d (at the demand node).

    Phi(y) = (y_a+10, y_b-20, y_c+10, y_d+20), costs c_z = c_x = 0.5,
    x <= 7.5, z binary.  The leader polyhedron is the capacity linking row
    x - linking_coeff*z <= 0; the default 7.5 (= x_bar) reproduces the
    reference optimal value 10.78125 and root relaxation bound 11.12347.
    """
    return BilevelSpeProblem(
        c_z=[0.5],
        c_x=[0.5],
        ub_z=[1.0],
        ub_x=[7.5],
        integer_mask_z=[True],
        integer_mask_x=[False],
        A_P=[[-linking_coeff, 1.0]],
        b_P=[0.0],
        G0=[[1.0, 0.0, -1.0, 0.0]],
        G1=[[-1.0, 1.0, 0.0, -1.0]],
        H0=np.zeros((1, 0)),
        H1=np.zeros((1, 0)),
        h0=[0.0],
        h1=[0.0],
        ub_y=[np.inf, np.inf, np.inf, np.inf],
        ub_w=np.zeros(0),
        R=np.eye(4),
        r=[10.0, -20.0, 10.0, 20.0],
    )


# ---------------------------------------------------------------------------
# CSV layout: per-instance folder with nodes/arcs/demand/supply/candidates/meta
# ---------------------------------------------------------------------------

def save_efl_csv(inst: EflInstance, folder: str, force: bool = False) -> None:
    if os.path.exists(folder) and os.listdir(folder) and not force:
        raise FileExistsError(f"{folder} exists and is not empty (use force)")
    os.makedirs(folder, exist_ok=True)

    def write(name, header, rows):
        with open(os.path.join(folder, name), "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(header)
            wr.writerows(rows)

    write("nodes.csv", ["node"], [[i] for i in range(inst.n_nodes)])
    write("arcs.csv", ["i", "j", "alpha0", "alpha1"],
          [[i, j, repr(a0), repr(a1)]
           for (i, j), a0, a1 in zip(inst.arcs, inst.alpha0, inst.alpha1)])
    write("demand.csv", ["i", "beta0", "beta1"],
          [[int(i), repr(b0), repr(b1)]
           for i, b0, b1 in zip(inst.demand_nodes, inst.beta0, inst.beta1)])
    write("supply.csv", ["j", "gamma0", "gamma1"],
          [[int(j), repr(g0), repr(g1)]
           for j, g0, g1 in zip(inst.supply_nodes, inst.gamma0, inst.gamma1)])
    write("candidates.csv", ["i", "c", "v", "qbar"],
          [[int(i), repr(c), repr(v), repr(qb)]
           for i, c, v, qb in zip(inst.candidates, inst.open_cost, inst.unit_cost, inst.q_bar)])
    write("meta.csv", ["q_max", "seed"], [[repr(inst.q_max), inst.seed]])


def load_efl_csv(folder: str) -> EflInstance:
    def read(name):
        with open(os.path.join(folder, name), newline="") as f:
            rows = list(csv.reader(f))
        return rows[0], rows[1:]

    _, node_rows = read("nodes.csv")
    n_nodes = len(node_rows)
    _, arc_rows = read("arcs.csv")
    arcs = tuple((int(r[0]), int(r[1])) for r in arc_rows)
    alpha0 = np.array([float(r[2]) for r in arc_rows])
    alpha1 = np.array([float(r[3]) for r in arc_rows])
    _, dem_rows = read("demand.csv")
    demand_nodes = np.array([int(r[0]) for r in dem_rows])
    beta0 = np.array([float(r[1]) for r in dem_rows])
    beta1 = np.array([float(r[2]) for r in dem_rows])
    _, sup_rows = read("supply.csv")
    supply_nodes = np.array([int(r[0]) for r in sup_rows])
    gamma0 = np.array([float(r[1]) for r in sup_rows])
    gamma1 = np.array([float(r[2]) for r in sup_rows])
    _, cand_rows = read("candidates.csv")
    candidates = np.array([int(r[0]) for r in cand_rows])
    open_cost = np.array([float(r[1]) for r in cand_rows])
    unit_cost = np.array([float(r[2]) for r in cand_rows])
    q_bar = np.array([float(r[3]) for r in cand_rows])
    _, meta_rows = read("meta.csv")
    q_max = float(meta_rows[0][0])
    seed = int(meta_rows[0][1])

    return EflInstance(
        n_nodes=n_nodes, arcs=arcs, candidates=candidates,
        demand_nodes=demand_nodes, supply_nodes=supply_nodes,
        alpha0=alpha0, alpha1=alpha1, beta0=beta0, beta1=beta1,
        gamma0=gamma0, gamma1=gamma1, open_cost=open_cost,
        unit_cost=unit_cost, q_bar=q_bar, q_max=q_max, seed=seed,
    )

"""Renewable generation unit planning on DC power networks.

IEEE-style CSV ingestion (parallel lines merged into equivalent single
lines, each line doubled into two opposite nonnegative arcs), Kirchhoff
loop matrix from a BFS fundamental cycle basis, uncertainty sampling,
and the lowering of the K-sample SAA problem to the generic bilevel SPE
form: per sample, y = (d, s) with s capped at generator capacity,
w = f with line capacities, h = 0.  Loop-law rows carry sign-free duals
(they are not prices), and each sample block's VI cost is scaled by 1/K
so the generic objective is the sample average.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .problem import BilevelSpeProblem, FollowerBlock


class ParseError(ValueError):
    pass


class ZeroLoadRating(ValueError):
    pass


@dataclass(frozen=True)
class RgupNetwork:
    buses: tuple                 # external bus ids, index = internal id
    lines: tuple                 # merged (i, j, reactance, capacity), 0-based
    load_buses: np.ndarray       # N_d internal ids
    load_mw: np.ndarray
    gen_buses: np.ndarray        # N_s internal ids
    gen_capacity: np.ndarray
    gamma0: np.ndarray
    gamma1: np.ndarray
    candidates: np.ndarray       # N_0 internal ids
    open_cost: np.ndarray
    unit_cost: np.ndarray
    q_bar: np.ndarray
    beta0: np.ndarray
    beta1: np.ndarray

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def arcs(self) -> list:
        out = []
        for (i, j, _, _) in self.lines:
            out.append((i, j))
            out.append((j, i))
        return out


@dataclass(frozen=True)
class UncertaintySamples:
    xi: np.ndarray               # K x |N0|, entries in [0, 1]

    def __post_init__(self):
        xi = np.atleast_2d(np.asarray(self.xi, dtype=float))
        if xi.size and (xi.min() < 0.0 or xi.max() > 1.0):
            raise ValueError("uncertainty samples must lie in [0, 1]")
        object.__setattr__(self, "xi", xi)

    @property
    def K(self) -> int:
        return self.xi.shape[0]


def build_demand_slopes(load_mw: np.ndarray, gamma0=None, gamma1=None):
    """Demand curve coefficients: intercept 40, slope (40-30)/rating; the
    supply-bid coefficients are validated against their admissible ranges."""
    load_mw = np.asarray(load_mw, dtype=float)
    if np.any(load_mw <= 0):
        raise ZeroLoadRating("every load bus needs a positive MW rating")
    beta0 = np.full(len(load_mw), 40.0)
    beta1 = (40.0 - 30.0) / load_mw
    if gamma0 is not None:
        g0, g1 = np.asarray(gamma0, float), np.asarray(gamma1, float)
        if np.any(g0 <= 10.0) or np.any(g0 >= 33.0):
            raise ValueError("gamma0 outside the admissible range (10, 33)")
        if np.any(g1 <= 0.03) or np.any(g1 >= 0.70):
            raise ValueError("gamma1 outside the admissible range (0.03, 0.70)")
    return beta0, beta1


def _read_csv(path, expected_cols):
    if not os.path.exists(path):
        raise ParseError(f"missing file {path}")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[:len(expected_cols)] != list(expected_cols):
        raise ParseError(f"{path}: expected columns {expected_cols}, found {header}")
    out = []
    for k, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            out.append([float(c) for c in row[:len(expected_cols)]])
        except ValueError as exc:
            raise ParseError(f"{path}: row {k}: {exc}") from exc
    return out


def load_ieee(folder: str) -> RgupNetwork:
    """Load a per-bus network folder (upper_level.csv plus lower_level/)."""
    low = os.path.join(folder, "lower_level")
    bus_rows = _read_csv(os.path.join(low, "buses.csv"), ["bus"])
    buses = tuple(int(r[0]) for r in bus_rows)
    index = {b: i for i, b in enumerate(buses)}
    if len(index) != len(buses):
        raise ParseError("duplicate bus ids")

    line_rows = _read_csv(os.path.join(low, "lines.csv"),
                          ["from_bus", "to_bus", "reactance", "capacity_mw"])
    merged: dict = {}
    for r in line_rows:
        i, j = index[int(r[0])], index[int(r[1])]
        if i == j:
            raise ParseError(f"self-loop line at bus {int(r[0])}")
        key = (min(i, j), max(i, j))
        x, cap = float(r[2]), float(r[3])
        if x <= 0:
            raise ParseError(f"nonpositive reactance on line {key}")
        if key in merged:
            # parallel circuits: equivalent reactance, capacities add
            x0, c0 = merged[key]
            merged[key] = (1.0 / (1.0 / x0 + 1.0 / x), c0 + cap)
        else:
            merged[key] = (x, cap)
    lines = tuple((i, j, x, c) for (i, j), (x, c) in sorted(merged.items()))

    gen_rows = _read_csv(os.path.join(low, "generators.csv"),
                         ["bus", "capacity_mw", "gamma0", "gamma1"])
    gen_buses = np.array([index[int(r[0])] for r in gen_rows])
    gen_capacity = np.array([r[1] for r in gen_rows])
    gamma0 = np.array([r[2] for r in gen_rows])
    gamma1 = np.array([r[3] for r in gen_rows])

    load_rows = _read_csv(os.path.join(low, "loads.csv"), ["bus", "load_mw"])
    load_buses = np.array([index[int(r[0])] for r in load_rows])
    load_mw = np.array([r[1] for r in load_rows])

    up_rows = _read_csv(os.path.join(folder, "upper_level.csv"),
                        ["bus", "open_cost", "unit_cost", "q_bar"])
    candidates = np.array([index[int(r[0])] for r in up_rows])
    open_cost = np.array([r[1] for r in up_rows])
    unit_cost = np.array([r[2] for r in up_rows])
    q_bar = np.array([r[3] for r in up_rows])

    if set(candidates.tolist()) & set(gen_buses.tolist()):
        raise ParseError("candidate RGU buses must not host existing generators")
    beta0, beta1 = build_demand_slopes(load_mw, gamma0, gamma1)
    return RgupNetwork(
        buses=buses, lines=lines, load_buses=load_buses, load_mw=load_mw,
        gen_buses=gen_buses, gen_capacity=gen_capacity, gamma0=gamma0,
        gamma1=gamma1, candidates=candidates, open_cost=open_cost,
        unit_cost=unit_cost, q_bar=q_bar, beta0=beta0, beta1=beta1)


def cycle_basis(network: RgupNetwork) -> np.ndarray:
    """Loop matrix over the doubled arcs from a BFS fundamental cycle basis.

    Row m has +s*x on arc (i,j) and -s*x on its opposite arc, so the loop
    law binds the net line flows f_ij - f_ji.
    """
    n = network.n_buses
    lines = network.lines
    adj: dict = {i: [] for i in range(n)}
    for k, (i, j, _, _) in enumerate(lines):
        adj[i].append((j, k))
        adj[j].append((i, k))

    parent = {}           # bus -> (parent bus, line index)
    depth = {}
    in_tree = set()
    order = []
    for root in range(n):
        if root in parent or root in depth:
            continue
        depth[root] = 0
        parent[root] = None
        queue = [root]
        while queue:
            u = queue.pop(0)
            order.append(u)
            for (v, k) in adj[u]:
                if v not in depth:
                    depth[v] = depth[u] + 1
                    parent[v] = (u, k)
                    in_tree.add(k)
                    queue.append(v)

    def line_orientation(u, v, k):
        # +1 when traversing line k in its stored (from, to) direction
        i, j, _, _ = lines[k]
        return 1.0 if (u, v) == (i, j) else -1.0

    rows = []
    for k, (i, j, x, _) in enumerate(lines):
        if k in in_tree:
            continue
        # loop: chord j->i followed by tree path i -> j
        coeffs = {k: line_orientation(i, j, k)}
        u, v = i, j
        path_u, path_v = [], []
        while depth[u] > depth[v]:
            pu, ku = parent[u]
            path_u.append((u, pu, ku))
            u = pu
        while depth[v] > depth[u]:
            pv, kv = parent[v]
            path_v.append((pv, v, kv))
            v = pv
        while u != v:
            pu, ku = parent[u]
            path_u.append((u, pu, ku))
            u = pu
            pv, kv = parent[v]
            path_v.append((pv, v, kv))
            v = pv
        # walk i -> lca -> j
        for (a, b, kl) in path_u + list(reversed(path_v)):
            coeffs[kl] = coeffs.get(kl, 0.0) + line_orientation(a, b, kl)
        row = np.zeros(2 * len(lines))
        for kl, s in coeffs.items():
            if abs(s) < 0.5:
                continue
            x_l = lines[kl][2]
            row[2 * kl] = s * x_l
            row[2 * kl + 1] = -s * x_l
        rows.append(row)
    return np.array(rows).reshape(len(rows), 2 * len(lines))


def sample_uncertainty(network: RgupNetwork, K: int, seed: int) -> UncertaintySamples:
    rng = np.random.default_rng(seed)
    return UncertaintySamples(xi=rng.uniform(0.0, 1.0, size=(K, len(network.candidates))))


def save_samples(samples: UncertaintySamples, path: str, force: bool = False):
    if os.path.exists(path) and not force:
        raise FileExistsError(f"{path} exists (use force)")
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow([f"xi{j}" for j in range(samples.xi.shape[1])])
        for row in samples.xi:
            wr.writerow([repr(v) for v in row])


def load_samples(path: str) -> UncertaintySamples:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return UncertaintySamples(xi=np.array([[float(c) for c in r] for r in rows[1:]]))


def rgup_to_bilevel(network: RgupNetwork, samples: UncertaintySamples) -> BilevelSpeProblem:
    """Lower the K-sample SAA problem to the generic bilevel SPE form."""
    net = network
    K = samples.K
    n = net.n_buses
    arcs = net.arcs
    n_arc = len(arcs)
    n_d, n_s, n0 = len(net.load_buses), len(net.gen_buses), len(net.candidates)

    A_f = np.zeros((n, n_arc))
    for a, (i, j) in enumerate(arcs):
        A_f[i, a] = 1.0
        A_f[j, a] = -1.0
    A_d = np.zeros((n, n_d))
    A_d[net.load_buses, np.arange(n_d)] = 1.0
    A_s = np.zeros((n, n_s))
    A_s[net.gen_buses, np.arange(n_s)] = 1.0

    in0 = np.asarray(net.candidates, dtype=int)
    in1 = np.array([i for i in range(n) if i not in set(in0.tolist())], dtype=int)
    R_loop = cycle_basis(net)
    n_loop = R_loop.shape[0]

    ny_blk, nw_blk = n_d + n_s, n_arc
    m0_blk, m1_blk = n0, len(in1) + n_loop

    G0_blk = np.hstack([A_d[in0], np.zeros((n0, n_s))])
    G1_blk = np.vstack([np.hstack([A_d[in1], -A_s[in1]]),
                        np.zeros((n_loop, ny_blk))])
    H0_blk = A_f[in0]
    H1_blk = np.vstack([A_f[in1], R_loop])
    mask1_blk = np.concatenate([np.ones(len(in1), dtype=bool),
                                np.zeros(n_loop, dtype=bool)])

    ub_y_blk = np.concatenate([np.full(n_d, np.inf), net.gen_capacity])
    ub_w_blk = np.repeat([c for (_, _, _, c) in net.lines], 2).astype(float)
    R_blk = np.diag(np.concatenate([net.beta1, net.gamma1])) / K
    r_blk = np.concatenate([-net.beta0, net.gamma0]) / K

    G0 = np.kron(np.eye(K), G0_blk)
    G1 = np.kron(np.eye(K), G1_blk)
    H0 = np.kron(np.eye(K), H0_blk)
    H1 = np.kron(np.eye(K), H1_blk)
    D = np.vstack([np.diag(samples.xi[k]) for k in range(K)])
    R_vi = np.kron(np.eye(K), R_blk)
    r_vi = np.tile(r_blk, K)
    ub_y = np.tile(ub_y_blk, K)
    ub_w = np.tile(ub_w_blk, K)
    mask1 = np.tile(mask1_blk, K)

    blocks = tuple(
        FollowerBlock(
            y_idx=np.arange(k * ny_blk, (k + 1) * ny_blk),
            w_idx=np.arange(k * nw_blk, (k + 1) * nw_blk),
            row0_idx=np.arange(k * m0_blk, (k + 1) * m0_blk),
            row1_idx=np.arange(k * m1_blk, (k + 1) * m1_blk),
            weight=1.0 / K,
        ) for k in range(K))

    # leader polyhedron: gating rows x_i <= q_bar_i z_i (no budget row)
    A_P = np.zeros((n0, 2 * n0))
    for k in range(n0):
        A_P[k, k] = -net.q_bar[k]
        A_P[k, n0 + k] = 1.0

    return BilevelSpeProblem(
        c_z=net.open_cost, c_x=net.unit_cost,
        ub_z=np.ones(n0), ub_x=net.q_bar,
        integer_mask_z=np.ones(n0, dtype=bool),
        integer_mask_x=np.zeros(n0, dtype=bool),
        A_P=A_P, b_P=np.zeros(n0),
        G0=G0, G1=G1, H0=H0, H1=H1,
        h0=np.zeros(K * m0_blk), h1=np.zeros(K * m1_blk),
        ub_y=ub_y, ub_w=ub_w, R=R_vi, r=r_vi,
        x_coupling=D, pi1_price_mask=mask1, blocks=blocks)

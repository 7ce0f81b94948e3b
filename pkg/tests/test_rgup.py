"""RGUP ingestion, cycle basis, lowering, and SAA structure tests."""

import os

import numpy as np
import pytest

from spequil.follower import solve_follower_primal
from spequil.problem import validate
from spequil.reformulate import build_duality_model
from spequil.rgup import (
    ParseError,
    UncertaintySamples,
    ZeroLoadRating,
    build_demand_slopes,
    cycle_basis,
    load_ieee,
    rgup_to_bilevel,
    sample_uncertainty,
)

FIXTURES = os.path.join(os.path.dirname(__file__), "..", "fixtures")


@pytest.fixture(scope="module")
def net3():
    return load_ieee(os.path.join(FIXTURES, "rgup_3bus"))


@pytest.fixture(scope="module")
def net14():
    return load_ieee(os.path.join(FIXTURES, "ieee_14bus"))


def test_load_14bus_counts(net14):
    assert net14.n_buses == 14
    assert net14.n_lines == 20
    assert len(net14.load_buses) == 11
    assert len(net14.gen_buses) == 2
    assert len(net14.candidates) == 5


def test_load_30bus_counts():
    net = load_ieee(os.path.join(FIXTURES, "ieee_30bus"))
    assert net.n_buses == 30
    assert net.n_lines == 41
    assert len(net.load_buses) == 21
    assert len(net.gen_buses) == 2
    assert len(net.candidates) == 10


def test_empty_folder_parse_error(tmp_path):
    with pytest.raises(ParseError):
        load_ieee(str(tmp_path))


def test_candidates_disjoint_from_generators(tmp_path, net3):
    import shutil
    dst = tmp_path / "bad"
    shutil.copytree(os.path.join(FIXTURES, "rgup_3bus"), dst)
    (dst / "upper_level.csv").write_text("bus,open_cost,unit_cost,q_bar\n1,0,0,60\n")
    with pytest.raises(ParseError):
        load_ieee(str(dst))


def test_demand_slopes():
    beta0, beta1 = build_demand_slopes(np.array([50.0]))
    assert beta0[0] == 40.0
    assert abs(beta1[0] - 0.2) < 1e-12
    _, b1 = build_demand_slopes(np.array([10.0]))
    assert abs(b1[0] - 1.0) < 1e-12
    with pytest.raises(ZeroLoadRating):
        build_demand_slopes(np.array([0.0]))
    with pytest.raises(ValueError):
        build_demand_slopes(np.array([50.0]), gamma0=[5.0], gamma1=[0.5])


def test_cycle_basis_triangle(net3):
    R = cycle_basis(net3)
    assert R.shape == (1, 6)
    # net-flow convention: opposite arcs carry opposite coefficients
    for k in range(3):
        assert abs(R[0, 2 * k] + R[0, 2 * k + 1]) < 1e-12
    # the loop law is consistent: coefficient magnitudes equal the reactances
    mags = sorted(abs(R[0, 2 * k]) for k in range(3))
    assert np.allclose(mags, sorted([0.10, 0.20, 0.15]))


def test_cycle_basis_tree():
    import shutil, tempfile
    with tempfile.TemporaryDirectory() as tmp:
        dst = os.path.join(tmp, "tree")
        shutil.copytree(os.path.join(FIXTURES, "rgup_3bus"), dst)
        with open(os.path.join(dst, "lower_level", "lines.csv"), "w") as f:
            f.write("from_bus,to_bus,reactance,capacity_mw\n1,2,0.1,60\n2,3,0.15,60\n")
        net = load_ieee(dst)
        assert cycle_basis(net).shape == (0, 4)


def test_cycle_basis_14bus_rank(net14):
    R = cycle_basis(net14)
    assert R.shape[0] == 20 - 14 + 1   # lines - buses + components
    # rows are independent on the net-flow space
    net_cols = R[:, ::2]
    assert np.linalg.matrix_rank(net_cols) == 7


def test_cycle_basis_spanning_tree_invariance(net3):
    # the loop LAW is basis-invariant: follower optima agree for any basis.
    # reverse the line order to induce a different BFS tree on the doubled arcs
    import dataclasses
    rev = dataclasses.replace(net3, lines=tuple(reversed(net3.lines)))
    samples = UncertaintySamples(xi=np.array([[1.0]]))
    p1 = rgup_to_bilevel(net3, samples)
    p2 = rgup_to_bilevel(rev, samples)
    x = np.array([30.0])
    s1 = solve_follower_primal(p1, x)
    s2 = solve_follower_primal(p2, x)
    assert abs(s1.objective - s2.objective) <= 1e-7 * (1 + abs(s1.objective))


def test_lowering_shapes_and_validation(net3):
    samples = sample_uncertainty(net3, 3, seed=1)
    prob = rgup_to_bilevel(net3, samples)
    rep = validate(prob)
    assert rep.valid, str(rep)
    assert len(prob.blocks) == 3
    assert prob.n_y == 3 * (2 + 2)      # (d, s) per sample
    assert prob.n_w == 3 * 6            # doubled arcs per sample
    assert prob.m0 == 3 * 1
    # loop rows carry sign-free duals
    assert prob.pi1_price_mask.sum() == 3 * 2   # bus rows only
    assert (~prob.pi1_price_mask).sum() == 3 * 1


def test_kirchhoff_consistency(net3):
    samples = UncertaintySamples(xi=np.array([[0.7]]))
    prob = rgup_to_bilevel(net3, samples)
    sol = solve_follower_primal(prob, np.array([40.0]))
    R = cycle_basis(net3)
    f = sol.w
    assert np.abs(R @ f).max() <= 1e-8 * (1 + np.abs(f).max())
    # net-flow form of the same law
    net_flow = f[::2] - f[1::2]
    coeffs = R[0, ::2]
    assert abs(coeffs @ net_flow) <= 1e-8 * (1 + np.abs(f).max())


def test_sample_decomposability(net3):
    # SAA objective = mean of per-sample values at fixed (z, q)
    rng = np.random.default_rng(4)
    samples = sample_uncertainty(net3, 4, seed=9)
    prob = rgup_to_bilevel(net3, samples)
    model = build_duality_model(prob)
    from spequil.heuristics import round_and_repair, RhConfig
    out = round_and_repair(prob, np.ones(1), np.array([35.0]), RhConfig(), model=model)
    assert out.failure is None, out.failure
    total = model.objective_value(out.candidate)
    per_sample = []
    for k in range(4):
        p1 = rgup_to_bilevel(net3, UncertaintySamples(xi=samples.xi[k:k + 1]))
        m1 = build_duality_model(p1)
        o1 = round_and_repair(p1, np.ones(1), np.array([35.0]), RhConfig(), model=m1)
        assert o1.failure is None
        per_sample.append(m1.objective_value(o1.candidate))
    assert abs(total - np.mean(per_sample)) <= 1e-8 * (1 + abs(total))


def test_rh_exactly_2k_qp_solves(net3):
    from spequil.heuristics import RhConfig, round_and_repair_rgup
    for K in (1, 3, 5):
        samples = sample_uncertainty(net3, K, seed=2)
        prob = rgup_to_bilevel(net3, samples)
        out = round_and_repair_rgup(prob, np.ones(1), np.array([30.0]),
                                    samples.xi, RhConfig())
        assert out.failure is None, out.failure
        assert out.qp_solves == 2 * K


def test_k1_unit_sample_equals_deterministic(net3):
    # xi = 1 reduces to a deterministic single-follower problem
    samples = UncertaintySamples(xi=np.array([[1.0]]))
    prob = rgup_to_bilevel(net3, samples)
    np.testing.assert_allclose(prob.x_coupling, np.eye(1))
    assert len(prob.blocks) == 1


def test_duplicated_sample_same_value(net3):
    from spequil.bnb import BnbConfig, solve
    from spequil.heuristics import rgup_heuristic
    xi = np.array([[0.6]])
    p1 = rgup_to_bilevel(net3, UncertaintySamples(xi=xi))
    p2 = rgup_to_bilevel(net3, UncertaintySamples(xi=np.vstack([xi, xi])))
    r1 = solve(build_duality_model(p1), BnbConfig(time_limit=30),
               heuristic=rgup_heuristic(p1))
    r2 = solve(build_duality_model(p2), BnbConfig(time_limit=30),
               heuristic=rgup_heuristic(p2))
    assert r1.status == r2.status == "OptimalWithinGap"
    assert abs(r1.obj_val - r2.obj_val) <= 1e-5 * (1 + abs(r1.obj_val))


def test_xi_monotone_capacity(net3):
    # at fixed q, raising xi never decreases total injected RGU power
    q = np.array([50.0])
    injected = []
    for xi in (0.2, 0.5, 0.9):
        prob = rgup_to_bilevel(net3, UncertaintySamples(xi=np.array([[xi]])))
        sol = solve_follower_primal(prob, q)
        injected.append(xi * q[0])   # equality coupling injects exactly diag(xi) q
        rhs = prob.x_coupling @ q
        resid = prob.G0 @ sol.y + prob.H0 @ sol.w - rhs
        assert np.abs(resid).max() <= 1e-7
    assert injected == sorted(injected)

"""Single-level model builders, relaxations, Theorem-1 gap."""

import numpy as np
import pytest

from spequil.efl import efl_to_bilevel, generate_efl, toy_instance
from spequil.qp import solve_qp
from spequil.reformulate import (
    NotKktFeasible,
    build_duality_model,
    build_kkt_model,
    build_relaxation,
    constraints_signature,
    model_to_text,
    relaxation_value,
    theorem1_gap,
)

TOY_OPT = 10.78125
TOY_ROOT = 11.12347


def toy_opt_point(model):
    return model.pack(
        z=[1.0], x=[2.375], y=[2.375, 2.375, 0.0, 0.0],
        pi0=[5.25], pi1=[17.625], mu_y=[0.0, 0.0, 4.75, 2.375])


def test_kkt_model_structure(toy):
    m = build_kkt_model(toy)
    assert m.nonconvex
    assert len(m.pairs) == 4            # four lower-bound pairs, no upper pairs
    assert m.binary_idx.size == 1
    # objective pi0*x - 0.5x - 0.5z
    v = toy_opt_point(m)
    assert abs(m.objective_value(v) - TOY_OPT) < 1e-12


def test_duality_model_structure(toy):
    m = build_duality_model(toy)
    assert not m.nonconvex
    # Q restricted to the y block equals -R
    ysl = m.slices["y"]
    np.testing.assert_allclose(m.Q[ysl, ysl], -toy.R)
    # objective at the reference optimum evaluates to 10.78125
    v = toy_opt_point(m)
    assert abs(m.objective_value(v) - TOY_OPT) < 1e-9


def test_constraint_sets_identical(toy, efl_small):
    for prob in (toy, efl_small):
        a = build_kkt_model(prob)
        b = build_duality_model(prob)
        assert constraints_signature(a) == constraints_signature(b)
        assert not np.array_equal(a.Q, b.Q) or not np.array_equal(a.q, b.q)


def test_toy_duality_root_relaxation(toy):
    m = build_duality_model(toy)
    qp = build_relaxation(m)
    sol = solve_qp(qp)
    assert sol.optimal
    val = relaxation_value(m, sol.objective)
    assert abs(val - TOY_ROOT) < 1e-4
    assert abs(val - 141.5 ** 2 / 1800.0) < 1e-7   # closed form of the bound


def test_paper_text_variant_root_relaxation(toy_paper_text):
    # documented discrepancy: the printed x - 10z <= 0 set gives a different bound
    m = build_duality_model(toy_paper_text)
    sol = solve_qp(build_relaxation(m))
    val = relaxation_value(m, sol.objective)
    assert abs(val - 11.1628125) < 1e-6


def test_kkt_relaxation_flagged_nonconvex(toy):
    m = build_kkt_model(toy)
    qp = build_relaxation(m)
    assert qp.nonconvex
    with pytest.raises(ValueError):
        solve_qp(qp)


def test_relaxation_with_resolving_fixings(toy):
    # fixing z=1 and the optimal complementarity pattern recovers the optimum
    from spequil.bnb import BranchFixing
    m = build_duality_model(toy)
    fix = [BranchFixing.binary(m.binary_idx[0], 1)]
    # pairs are (y_i, mu_i); optimal pattern: mu_a = mu_b = 0, y_c = y_d = 0
    fix.append(BranchFixing.complementarity(0, "b"))   # mu_a -> 0
    fix.append(BranchFixing.complementarity(1, "b"))   # mu_b -> 0
    fix.append(BranchFixing.complementarity(2, "a"))   # y_c -> 0
    fix.append(BranchFixing.complementarity(3, "a"))   # y_d -> 0
    sol = solve_qp(build_relaxation(m, fix))
    assert sol.optimal
    assert abs(relaxation_value(m, sol.objective) - TOY_OPT) < 1e-6


def test_no_w_block_means_no_w_rows(toy):
    m = build_kkt_model(toy)
    assert m.slices["w"].start == m.slices["w"].stop
    assert m.slices["mu_w"].start == m.slices["mu_w"].stop


def test_mixed_bounds_pair_layout():
    p = toy_instance()
    object.__setattr__(p, "ub_y", np.array([5.0, np.inf, np.inf, np.inf]))
    m = build_duality_model(p)
    # pairs: {y_i, mu_i} for all four plus {ub-y_0, th_0}
    assert len(m.pairs) == 5
    kinds = [(pr.a[0], pr.b[0]) for pr in m.pairs]
    assert kinds.count(("ub_slack", "var")) == 1
    # duality objective picks up -5 * th_y0
    th = m.slices["th_y"]
    assert m.q[th.start] == -5.0


def test_theta_inf_elimination_soundness():
    # all-finite-bound instance: partitioned build equals an unpartitioned one
    p = toy_instance()
    big = 1e6
    object.__setattr__(p, "ub_y", np.full(4, big))
    m = build_duality_model(p)
    assert m.slices["th_y"].stop - m.slices["th_y"].start == 4
    sol = solve_qp(build_relaxation(m))
    val = relaxation_value(m, sol.objective)
    assert abs(val - 141.5 ** 2 / 1800.0) < 1e-4   # same bound, theta = 0 at optimum


def test_theorem1_gap_at_optimum(toy):
    m = build_duality_model(toy)
    v = toy_opt_point(m)
    assert theorem1_gap(toy, v) <= 1e-9


def test_theorem1_gap_at_other_kkt_points(toy):
    from spequil.follower import follower_kkt_point
    m = build_duality_model(toy)
    for xv in (1.0, 3.2):
        pt = follower_kkt_point(toy, np.array([xv]))
        v = m.pack(z=[1.0], x=[xv], y=pt["y"], pi0=pt["pi0"], pi1=pt["pi1"],
                   mu_y=pt["mu_y"])
        assert theorem1_gap(toy, v) <= 1e-8


def test_theorem1_rejects_infeasible(toy):
    m = build_duality_model(toy)
    v = toy_opt_point(m)
    v[m.slices["mu_y"].start] = 3.0    # breaks complementarity y_a * mu_a
    with pytest.raises(NotKktFeasible):
        theorem1_gap(toy, v)


def test_weak_duality_pointwise(toy, efl_small):
    # pi0'Dx >= -<Phi(y),y> - ub'th - h'pi on relaxation-feasible points
    from sampling import sample_relaxation_points
    for prob in (toy, efl_small):
        m = build_duality_model(prob)
        pts = sample_relaxation_points(m, 200, seed=1)
        sl = m.slices
        D = prob.x_coupling
        for v in pts:
            lhs = v[sl["pi0"]] @ D @ v[sl["x"]]
            y = v[sl["y"]]
            rhs = -(y @ prob.R @ y + prob.r @ y)
            rhs -= prob.ub_y[m.fin_y] @ v[sl["th_y"]]
            rhs -= prob.ub_w[m.fin_w] @ v[sl["th_w"]]
            rhs -= prob.h0 @ v[sl["pi0"]] + prob.h1 @ v[sl["pi1"]]
            assert lhs >= rhs - 1e-8 * (1 + abs(lhs))


def test_model_text_dump_grammar(toy):
    m = build_duality_model(toy)
    txt = model_to_text(m)
    assert txt.startswith("MODEL duality VARS")
    assert "PAIR 0: y0 _|_ mu_y0" in txt
    assert "OBJ MAX" in txt

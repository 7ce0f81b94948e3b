"""Branch-and-bound engine tests on the toy instance."""

import time

import numpy as np
import pytest

from spequil.bnb import (
    BnbConfig,
    BranchFixing,
    NoViolation,
    select_branch,
    solve,
)
from spequil.efl import toy_instance
from spequil.heuristics import RhConfig, RoundingHeuristic
from spequil.reformulate import build_duality_model

TOY_OPT = 10.78125
TOY_ROOT = 11.12347


def run_toy(**cfg):
    toy = toy_instance()
    model = build_duality_model(toy)
    rh = RoundingHeuristic(toy)
    return solve(model, BnbConfig(**cfg), heuristic=rh), model


def test_toy_solved_at_root():
    t0 = time.monotonic()
    res, model = run_toy()
    elapsed = time.monotonic() - t0
    assert res.status == "OptimalWithinGap"
    assert abs(res.obj_val - TOY_OPT) < 1e-4
    assert abs(res.root_relax - TOY_ROOT) < 1e-4
    assert res.node_count == 1
    assert elapsed < 1.0
    assert res.gap <= 1e-4
    # incumbent structure
    g = res.incumbent_groups
    assert abs(g["z"][0] - 1.0) < 1e-9
    assert abs(g["x"][0] - 2.375) < 1e-4


def test_toy_without_probing_still_closes():
    res, _ = run_toy(root_probing=False)
    assert res.status == "OptimalWithinGap"
    assert abs(res.obj_val - TOY_OPT) < 1e-4
    assert res.node_count == 1   # children pruned at creation by the RH incumbent


def test_toy_gap_zero_seeded_incumbent():
    # seeded optimum + zero gap: bound must close from 11.12347 to 10.78125
    toy = toy_instance()
    model = build_duality_model(toy)
    opt_point = model.pack(z=[1.0], x=[2.375], y=[2.375, 2.375, 0.0, 0.0],
                           pi0=[5.25], pi1=[17.625], mu_y=[0.0, 0.0, 4.75, 2.375])

    class Seeder:
        fired = False
        def __call__(self, point, mdl, ctx):
            if not Seeder.fired:
                Seeder.fired = True
                return [opt_point]
            return []

    res = solve(model, BnbConfig(gap=0.0, root_probing=False), heuristic=Seeder())
    assert res.status == "OptimalWithinGap"
    assert abs(res.obj_val - TOY_OPT) < 1e-9
    assert abs(res.root_relax - TOY_ROOT) < 1e-4
    assert res.obj_bnd - res.obj_val <= 1e-9
    # monotone bound sequence across dequeued nodes
    bounds = [e["bound"] for e in res.events if e["type"] == "node"]
    assert all(b1 >= b2 - 1e-9 for b1, b2 in zip(bounds, bounds[1:]))
    # incumbents nondecreasing
    incs = [e["value"] for e in res.events if e["type"] == "incumbent"]
    assert all(v1 <= v2 + 1e-12 for v1, v2 in zip(incs, incs[1:]))


def test_infeasible_variant():
    toy = toy_instance()
    A_P = np.vstack([toy.A_P, [[0.0, -1.0]]])   # -x <= -8 i.e. x >= 8 > ub_x
    b_P = np.concatenate([toy.b_P, [-8.0]])
    object.__setattr__(toy, "A_P", A_P)
    object.__setattr__(toy, "b_P", b_P)
    res = solve(build_duality_model(toy), BnbConfig())
    assert res.status == "Infeasible"
    assert res.obj_val is None


def test_select_branch_binary_first(toy):
    model = build_duality_model(toy)
    v = np.zeros(model.n)
    v[model.binary_idx[0]] = 0.5
    ysl, musl = model.slices["y"], model.slices["mu_y"]
    v[ysl.start], v[musl.start] = 2.0, 1.6          # violated pair too
    fix = select_branch(v, model)
    assert fix.kind == "binary"


def test_select_branch_max_product(toy):
    model = build_duality_model(toy)
    v = np.zeros(model.n)
    v[model.binary_idx[0]] = 1.0
    ysl, musl = model.slices["y"], model.slices["mu_y"]
    v[ysl.start + 0], v[musl.start + 0] = 1.0, 0.1   # product 0.1
    v[ysl.start + 1], v[musl.start + 1] = 2.0, 1.6   # product 3.2
    fix = select_branch(v, model)
    assert fix.kind == "complementarity"
    assert fix.index == 1


def test_select_branch_no_violation(toy):
    model = build_duality_model(toy)
    v = np.zeros(model.n)
    v[model.binary_idx[0]] = 1.0
    with pytest.raises(NoViolation):
        select_branch(v, model)


def test_branch_fixing_sibling():
    f = BranchFixing.binary(3, 1)
    assert f.sibling().value == 0
    g = BranchFixing.complementarity(2, "a")
    assert g.sibling().side == "b"


def test_bound_validity_against_enumeration():
    # 1 binary, 4 pairs: closed-form optimum max(0, max_x 9.5x - 2x^2 - 0.5)
    res, _ = run_toy(gap=0.0)
    true_opt = 9.5 * 2.375 - 2 * 2.375 ** 2 - 0.5
    assert res.obj_val <= res.obj_bnd + 1e-9
    assert res.obj_bnd >= true_opt - 1e-6
    assert abs(res.obj_val - true_opt) < 1e-6


def test_determinism_json():
    r1, _ = run_toy()
    r2, _ = run_toy()
    assert r1.to_json() == r2.to_json()


def test_node_limit_reports_timelimit():
    res, _ = run_toy(node_limit=0)
    assert res.status in ("TimeLimit", "OptimalWithinGap")


def test_refuses_kkt_model(toy):
    from spequil.reformulate import build_kkt_model
    with pytest.raises(ValueError):
        solve(build_kkt_model(toy), BnbConfig())

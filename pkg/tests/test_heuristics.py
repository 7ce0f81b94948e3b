"""Rounding heuristic tests."""

import numpy as np
import pytest

from spequil.efl import efl_to_bilevel, generate_efl, toy_instance
from spequil.heuristics import (
    RhConfig,
    RoundingHeuristic,
    detect_gates,
    round_and_repair,
)
from spequil.reformulate import build_duality_model

TOY_OPT = 10.78125


def test_gate_detection(toy):
    gates = detect_gates(toy)
    assert gates == {0: [0]}


def test_round_up_gives_optimal_candidate(toy):
    model = build_duality_model(toy)
    out = round_and_repair(toy, [0.6], [2.375], RhConfig(), model=model)
    assert out.failure is None
    assert out.qp_solves == 2
    val = model.objective_value(out.candidate)
    assert abs(val - TOY_OPT) < 1e-6
    assert max(model.feasibility_report(out.candidate).values()) <= 1e-8


def test_round_down_closes_facility(toy):
    model = build_duality_model(toy)
    out = round_and_repair(toy, [0.4], [2.375], RhConfig(), model=model)
    assert out.failure is None
    g = model.unpack(out.candidate)
    assert g["z"][0] == 0.0 and g["x"][0] == 0.0
    assert abs(model.objective_value(out.candidate) - 0.0) < 1e-9


def test_threshold_one_closes_everything(toy):
    model = build_duality_model(toy)
    out = round_and_repair(toy, [0.999], [2.0], RhConfig(threshold=1.0), model=model)
    g = model.unpack(out.candidate)
    assert g["z"][0] == 0.0


def test_threshold_monotonicity():
    prob = efl_to_bilevel(generate_efl(8, 12, seed=5))
    rng = np.random.default_rng(1)
    z_hat = rng.uniform(0, 1, prob.n_z)
    n_open_prev = None
    for th in (0.2, 0.5, 0.8):
        z_t = (z_hat > th).astype(float)
        n_open = int(z_t.sum())
        if n_open_prev is not None:
            assert n_open <= n_open_prev
        n_open_prev = n_open


def test_budget_repair_scaling():
    from sampling import feasible_x_top
    prob = efl_to_bilevel(generate_efl(8, 12, seed=7))
    # shrink the budget so the repaired production keeps prices positive
    b_P = prob.b_P.copy()
    b_P[-1] = 100.0
    object.__setattr__(prob, "b_P", b_P)
    model = build_duality_model(prob)
    # all facilities open at the largest follower-feasible production: the
    # budget row is then violated and must be repaired by downscaling
    x_hat = np.minimum(prob.ub_x, feasible_x_top(prob))
    assert x_hat.sum() > b_P[-1]
    out = round_and_repair(prob, np.ones(prob.n_z), x_hat, RhConfig(), model=model)
    assert out.failure is None, out.failure
    g = model.unpack(out.candidate)
    assert g["x"].sum() <= b_P[-1] + 1e-8
    # support preserved, proportional shrink
    mask = x_hat > 0
    ratio = g["x"][mask] / x_hat[mask]
    assert np.allclose(ratio, ratio[0], atol=1e-9)
    assert max(model.feasibility_report(out.candidate).values()) <= 1e-8


def test_budget_violation_discarded_when_prices_collapse():
    # saturating the full budget floods the market: negative prices, discarded
    from sampling import feasible_x_top
    prob = efl_to_bilevel(generate_efl(8, 12, seed=7))
    model = build_duality_model(prob)
    x_hat = np.minimum(prob.ub_x, feasible_x_top(prob))
    out = round_and_repair(prob, np.ones(prob.n_z), x_hat, RhConfig(), model=model)
    assert out.candidate is None
    assert out.failure.reason == "negative_price"
    # the scaling itself happened before the price check
    assert out.x_repaired.sum() <= prob.b_P[-1] + 1e-8


def test_candidate_prices_nonnegative(toy):
    model = build_duality_model(toy)
    out = round_and_repair(toy, [1.0], [2.375], RhConfig(), model=model)
    g = model.unpack(out.candidate)
    assert g["pi0"].min() >= -1e-8 and g["pi1"].min() >= -1e-8


def test_negative_price_candidate_discarded(toy):
    # x = 7.5 has pi0 = -5 < 0: no nonnegative selection exists
    model = build_duality_model(toy)
    out = round_and_repair(toy, [1.0], [7.5], RhConfig(), model=model)
    assert out.candidate is None
    assert out.failure.reason == "negative_price"


def test_invocation_policy():
    toy = toy_instance()
    rh = RoundingHeuristic(toy, RhConfig(always_until_incumbents=2, bernoulli_p=0.0))

    class Ctx:
        def __init__(self, n, force=False):
            self.n_incumbents = n
            self.force = force
            self.rng = np.random.default_rng(0)

    assert rh.should_fire(Ctx(0))
    assert rh.should_fire(Ctx(1))
    assert not rh.should_fire(Ctx(2))
    assert rh.should_fire(Ctx(5, force=True))

    rh2 = RoundingHeuristic(toy, RhConfig(always_until_incumbents=0, bernoulli_p=1.0))
    assert rh2.should_fire(Ctx(3))


def test_candidate_value_never_exceeds_bound():
    # heuristic candidates are feasible, so their value stays below any valid bound
    from spequil.bnb import BnbConfig, solve
    prob = efl_to_bilevel(generate_efl(8, 12, seed=3))
    model = build_duality_model(prob)
    rh = RoundingHeuristic(prob)
    res = solve(model, BnbConfig(time_limit=60), heuristic=rh)
    assert res.status == "OptimalWithinGap"
    for e in res.events:
        if e["type"] == "incumbent":
            assert e["value"] <= res.root_relax + 1e-6
    assert res.obj_val <= res.obj_bnd + 1e-9

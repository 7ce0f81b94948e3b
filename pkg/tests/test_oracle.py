"""Grid oracle tests."""

import numpy as np
import pytest

from spequil.efl import efl_to_bilevel, generate_efl, toy_instance
from spequil.oracle import TooLarge, grid_oracle

TOY_OPT = 10.78125


def test_toy_fine_grid():
    toy = toy_instance()
    res = grid_oracle(toy, step=0.025)
    # value function 9.5x - 2x^2 - 0.5 is concave; grid hits within step/2
    assert res.value <= TOY_OPT + 1e-9
    assert res.value >= TOY_OPT - res.lipschitz_estimate * res.step
    assert abs(res.x_best[0] - 2.375) <= 0.013
    assert res.z_best[0] == 1.0


def test_toy_endpoints_only():
    toy = toy_instance()
    res = grid_oracle(toy, step=7.5)
    # degenerate grid x in {0, 7.5}: 7.5 is price-infeasible, 0 gives value 0
    assert abs(res.value - 0.0) < 1e-9


def test_too_many_binaries():
    prob = efl_to_bilevel(generate_efl(12, 14, seed=0))   # |N0| = 9 binaries
    with pytest.raises(TooLarge):
        grid_oracle(prob, step=10.0)


def test_cap_enforced():
    toy = toy_instance()
    with pytest.raises(TooLarge):
        grid_oracle(toy, step=0.001, cap=100)


def test_fast_path_matches_generic():
    prob = efl_to_bilevel(generate_efl(4, 6, seed=11))
    fast = grid_oracle(prob, step=25.0, use_fast_path=True)
    slow = grid_oracle(prob, step=25.0, use_fast_path=False)
    assert fast.points_evaluated == slow.points_evaluated
    if slow.value > -np.inf:
        assert abs(fast.value - slow.value) <= 1e-6 * (1 + abs(slow.value))
        np.testing.assert_allclose(fast.x_best, slow.x_best, atol=1e-9)
    else:
        assert fast.value == -np.inf


def test_oracle_value_is_lower_bound_for_bnb():
    from spequil.bnb import BnbConfig, solve
    from spequil.heuristics import RoundingHeuristic
    from spequil.reformulate import build_duality_model
    prob = efl_to_bilevel(generate_efl(4, 6, seed=11))
    res = solve(build_duality_model(prob), BnbConfig(time_limit=60),
                heuristic=RoundingHeuristic(prob))
    assert res.status == "OptimalWithinGap"
    oracle = grid_oracle(prob, step=5.0)
    assert oracle.value <= res.obj_val + 1e-6 * (1 + abs(res.obj_val))
    assert res.obj_val <= res.obj_bnd + 1e-9
    assert res.obj_bnd - oracle.value <= oracle.resolution_bound + 1e-4 * (1 + abs(res.obj_bnd))

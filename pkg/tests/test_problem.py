"""Problem data model and validation tests."""

import numpy as np
import pytest

from spequil.problem import BilevelSpeProblem, partition_bounds, validate
from spequil.efl import toy_instance

from conftest import toy_follower_truth


def test_toy_validates(toy):
    rep = validate(toy)
    assert rep.valid, str(rep)


def test_zero_R_invalid(toy):
    bad = toy_instance()
    object.__setattr__(bad, "R", np.zeros((4, 4)))
    rep = validate(bad)
    assert not rep.valid
    assert any("positive definite" in f for f in rep.failures)


def test_dimension_mismatch_enumerated(toy):
    bad = toy_instance()
    object.__setattr__(bad, "G0", np.ones((2, 4)))  # rows != len(h0)
    rep = validate(bad)
    assert not rep.valid
    assert any("G0" in f or "coupling" in f for f in rep.failures)


def test_partition_all_infinite(toy):
    part = partition_bounds(toy)
    np.testing.assert_array_equal(part.inf_y, [0, 1, 2, 3])
    assert part.fin_y.size == 0


def test_partition_all_finite():
    p = toy_instance()
    object.__setattr__(p, "ub_y", np.array([1.0, 2.0, 3.0, 4.0]))
    part = partition_bounds(p)
    assert part.inf_y.size == 0
    np.testing.assert_array_equal(part.fin_y, [0, 1, 2, 3])


def test_partition_mixed():
    p = toy_instance()
    ub = np.array([np.inf, 5.0, np.inf, 7.0])
    object.__setattr__(p, "ub_y", ub)
    part = partition_bounds(p)
    np.testing.assert_array_equal(part.inf_y, [0, 2])
    np.testing.assert_array_equal(part.fin_y, [1, 3])
    # idempotent and a true partition
    part2 = partition_bounds(p)
    np.testing.assert_array_equal(part.inf_y, part2.inf_y)
    assert set(part.inf_y) | set(part.fin_y) == set(range(4))
    assert not set(part.inf_y) & set(part.fin_y)


def test_strict_monotonicity_random_pairs(toy):
    # PD R implies <Phi(y1)-Phi(y2), y1-y2> > 0 for y1 != y2
    rng = np.random.default_rng(5)
    for _ in range(100):
        y1, y2 = rng.normal(size=4), rng.normal(size=4)
        if np.allclose(y1, y2):
            continue
        gap = (toy.phi(y1) - toy.phi(y2)) @ (y1 - y2)
        assert gap > 0


def test_immutability(toy):
    with pytest.raises(ValueError):
        toy.R[0, 0] = 5.0


def test_toy_phi_matches_reference(toy):
    y = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(toy.phi(y), [11.0, -18.0, 13.0, 24.0])


def test_blocks_default_single(toy):
    assert len(toy.blocks) == 1
    np.testing.assert_array_equal(toy.blocks[0].y_idx, np.arange(4))

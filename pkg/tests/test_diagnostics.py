"""Unbounded-ray certification and boundedness diagnostics."""

import numpy as np
import pytest

from spequil.diagnostics import (
    InvalidWitness,
    UnboundedRayCertificate,
    check_duality_bounded,
    default_witness,
    find_unbounded_ray,
    simulate_growth,
    validate_certificate,
)
from spequil.efl import efl_to_bilevel, generate_efl, toy_instance


def reference_toy_certificate(toy):
    # the published ray: y=(1,1,1,0), pi=(1,0), mu=(2,1,0,0) at witness (1, 7.5)
    return UnboundedRayCertificate(
        y_ray=np.array([1.0, 1.0, 1.0, 0.0]), w_ray=np.zeros(0),
        pi0_ray=np.array([1.0]), pi1_ray=np.array([0.0]),
        mu_y_ray=np.array([2.0, 1.0, 0.0, 0.0]), mu_w_ray=np.zeros(0),
        theta_y_ray=np.zeros(4), theta_w_ray=np.zeros(0),
        witness_z=np.array([1.0]), witness_x=np.array([7.5]),
        growth_rate=7.5)


def test_reference_ray_validates(toy):
    cert = reference_toy_certificate(toy)
    ok, failures = validate_certificate(toy, cert)
    assert ok, failures


def test_find_ray_on_toy(toy):
    cert = find_unbounded_ray(toy, witness=(np.array([1.0]), np.array([7.5])))
    assert cert is not None
    assert cert.growth_rate > 1e-6
    ok, failures = validate_certificate(toy, cert)
    assert ok, failures
    # finite-bound variables would be pinned: toy has none, ray lives on y
    assert cert.y_ray.min() >= -1e-10


def test_zero_witness_gives_none(toy):
    cert = find_unbounded_ray(toy, witness=(np.array([0.0]), np.array([0.0])))
    assert cert is None   # growth pi0~'x = 0 kills the objective


def test_invalid_witness_raises(toy):
    with pytest.raises(InvalidWitness):
        find_unbounded_ray(toy, witness=(np.array([0.0]), np.array([7.5])))


def test_default_witness_toy(toy):
    z_dot, x_dot = default_witness(toy)
    np.testing.assert_allclose(x_dot, [7.5])
    assert abs(z_dot[0] - 1.0) < 1e-6   # only z = 1 admits x = 7.5


def test_default_witness_with_budget():
    # EFL budget cuts the box corner: fallback witness maximizes total x
    prob = efl_to_bilevel(generate_efl(10, 15, seed=42))
    z_dot, x_dot = default_witness(prob)
    lhs = prob.A_P @ np.concatenate([z_dot, x_dot])
    assert np.all(lhs <= prob.b_P + 1e-6)
    assert x_dot.sum() > 0


def test_growth_simulation_toy(toy):
    cert = find_unbounded_ray(toy, witness=(np.array([1.0]), np.array([7.5])))
    sim = simulate_growth(toy, cert, rhos=(1.0, 10.0, 100.0))
    assert sim.ok, sim
    assert sim.max_objective_error <= 1e-6


def test_growth_simulation_reference_ray(toy):
    sim = simulate_growth(toy, reference_toy_certificate(toy))
    assert sim.ok, sim


def test_efl_random_instance_certified_unbounded():
    prob = efl_to_bilevel(generate_efl(10, 15, seed=1))
    cert = find_unbounded_ray(prob)
    assert cert is not None
    ok, failures = validate_certificate(prob, cert)
    assert ok, failures


def test_duality_bounded_reports(toy):
    assert check_duality_bounded(toy).status == "Bounded"
    prob = efl_to_bilevel(generate_efl(10, 15, seed=2))
    assert check_duality_bounded(prob).status == "Bounded"
    bad = toy_instance()
    object.__setattr__(bad, "h0", np.array([1.0]))
    assert check_duality_bounded(bad).status == "Unknown"


def test_bounded_implies_root_optimal():
    # whenever the certificate says Bounded, the duality root QP is Optimal
    from spequil.qp import solve_qp
    from spequil.reformulate import build_duality_model, build_relaxation
    for seed in range(8):
        prob = efl_to_bilevel(generate_efl(8, 12, seed=seed))
        assert check_duality_bounded(prob).status == "Bounded"
        sol = solve_qp(build_relaxation(build_duality_model(prob)))
        assert sol.status == "Optimal"

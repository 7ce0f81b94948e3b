import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from spequil.efl import generate_efl, efl_to_bilevel, toy_instance


@pytest.fixture
def toy():
    return toy_instance()


@pytest.fixture
def toy_paper_text():
    # variant with the x - 10z <= 0 linking row as printed in the reference text
    return toy_instance(linking_coeff=10.0)


@pytest.fixture(scope="session")
def efl_small():
    return efl_to_bilevel(generate_efl(10, 15, seed=42))


def toy_follower_truth(x):
    """Closed-form toy follower solution for x in [0, 7.5], derived by
    active-set enumeration of the 4-variable QP (verified in tests)."""
    y = np.array([x, x, 0.0, 0.0])
    pi = np.array([10.0 - 2 * x, 20.0 - x])
    mu = np.array([0.0, 0.0, 2 * x, x])
    return y, pi, mu

import pytest

from sampfa.ieee39 import ieee39
from sampfa.newton import solve


@pytest.fixture(scope="session")
def net39():
    return ieee39()


@pytest.fixture(scope="session")
def sol39(net39):
    sol, rep = solve(net39)
    assert rep.converged
    return sol

import pytest

from tailrisk.scenario import load_shipped


@pytest.fixture(scope="session")
def nominal():
    return load_shipped("nominal-6state")


@pytest.fixture(scope="session")
def mixing(nominal):
    """The 6-state scenario with frequent crossings both ways, so every state recurs."""
    return nominal.with_changes(epsilon="0.05", delta="0.05")


@pytest.fixture(scope="session")
def aliasing():
    return load_shipped("aliasing-4state")


@pytest.fixture(scope="session")
def injective():
    return load_shipped("injective-3state")


@pytest.fixture(scope="session")
def single_obs():
    return load_shipped("single-observation")

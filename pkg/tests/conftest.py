import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dpnet import systems


@pytest.fixture(scope="session")
def logistic_oracle_small():
    """Grid-512 transfer oracle; plenty for unit-level checks."""
    return systems.logistic_oracle(20, 512)


@pytest.fixture(scope="session")
def logistic_oracle_default():
    """The default grid-1024 oracle used by the acceptance protocol."""
    return systems.logistic_oracle(20, 1024)


@pytest.fixture(scope="session")
def ou_system():
    return systems.LangevinSystem(
        potential=(0.5, 0.0, 0.0), beta=1.0, dt=1e-3, domain=(-6.0, 6.0), grid_size=1024
    )


@pytest.fixture(scope="session")
def ou_oracle(ou_system):
    return ou_system.generator_oracle()


@pytest.fixture(scope="session")
def double_well_system():
    return systems.LangevinSystem()


@pytest.fixture(scope="session")
def double_well_oracle(double_well_system):
    return double_well_system.generator_oracle()

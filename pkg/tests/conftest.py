import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from humas_lab.trace import FleetEntry, MachineFleet


@pytest.fixture
def two_type_fleet():
    return MachineFleet((
        FleetEntry("m-std", 30, 64, True),
        FleetEntry("m-alt", 16, 48, False),
    ))


@pytest.fixture
def rng():
    return np.random.default_rng(0)

import numpy as np
import pytest

from amber.tensor import default_tape


@pytest.fixture(autouse=True)
def _fresh_default_tape():
    # Ops run outside an explicit ComputationTape record onto the shared
    # default tape; clearing it keeps tests independent and memory flat.
    default_tape().clear()
    yield
    default_tape().clear()


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(numeric).max()), 1e-8)
    return float(np.abs(analytic - numeric).max()) / scale

import numpy as np
import pytest

from dicesm import LabelField, ProbField


def vec_prob(values) -> ProbField:
    """C == 1 prediction field from a flat vector."""
    a = np.asarray(values, dtype=np.float64).reshape(1, 1, -1)
    return ProbField.from_array(a)


def vec_label(values, hardness=None) -> LabelField:
    """C == 1 label field from a flat vector; hardness inferred unless given."""
    a = np.asarray(values, dtype=np.float64).reshape(1, 1, -1)
    if hardness is None:
        hardness = "hard" if np.all((a == 0.0) | (a == 1.0)) else "soft"
    return LabelField.from_array(a, hardness)


@pytest.fixture
def rng():
    return np.random.default_rng(42)

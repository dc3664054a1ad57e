import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings, strategies as st

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

DT = torch.float64


def ball(rng, n, d=3, max_radius=0.9, kappa=1.0):
    x = rng.normal(size=(n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    r = rng.uniform(0, max_radius, size=(n, 1)) / kappa ** 0.5
    return torch.as_tensor(x * r, dtype=DT)


def vectors(dim=3, lo=-0.6, hi=0.6):
    """Hypothesis strategy for points well inside the unit ball."""
    coord = st.floats(lo, hi, allow_nan=False, allow_infinity=False)
    return st.lists(coord, min_size=dim, max_size=dim).map(lambda v: torch.tensor(v, dtype=DT)).filter(
        lambda v: float(v.norm()) < 0.95
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

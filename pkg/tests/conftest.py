import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tridit.model import ModelConfig
from tridit.synthdata import World, WorldConfig

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def world():
    return World(WorldConfig())


@pytest.fixture
def tiny_cfg():
    """Small geometry for fast model tests."""
    return ModelConfig(num_blocks=2, d_model=16, num_heads=2, frames=3, height=4, width=4,
                       text_vocab=10, audio_feat_dim=5, time_dim=8, mlp_ratio=2)


def fd_grad(f, x: np.ndarray, idx, eps=1e-6) -> float:
    """Central finite difference of scalar ``f()`` w.r.t. ``x[idx]`` (in place)."""
    old = x[idx]
    x[idx] = old + eps
    hi = f()
    x[idx] = old - eps
    lo = f()
    x[idx] = old
    return (hi - lo) / (2 * eps)

import numpy as np
import pytest

from streamdiff.core import Condition, make_rng
from streamdiff.denoiser import AnalyticGaussianModel
from streamdiff.guidance import GuidanceConfig
from streamdiff.scheduler import build_schedule

D = 8


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def conds():
    return Condition("positive", np.ones(D)), Condition("negative", -np.ones(D))


def make_setup(n, mode="self_negative", gamma=1.4, delta=1.0, seed=0, d=D, data_variance=0.25):
    """Schedule, shared noise cache, backend and guidance config for engine tests."""
    schedule = build_schedule(n)
    r = make_rng(seed)
    eps = [r.standard_normal(d) for _ in range(n)]
    neg = Condition("negative", -np.ones(d))
    gcfg = GuidanceConfig(mode, gamma, delta, neg)
    return schedule, eps, AnalyticGaussianModel(data_variance), gcfg

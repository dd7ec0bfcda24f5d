import sys

import numpy as np
import pytest
from hypothesis import settings

from trajmoe import core
from trajmoe.config import ModelConfig, TrainConfig
from trajmoe.synth import GeneratorConfig, generate

settings.register_profile("repo", max_examples=40, deadline=None)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data():
    """Two small noise-0 cities, windows of at most 16 steps."""
    return generate(GeneratorConfig(seed=3, cities=2, users=24, days=6), T=16)


@pytest.fixture(scope="session")
def small_train_cfg():
    return TrainConfig(T=16, max_epochs=2, seed=0, model=ModelConfig(d=16, layers=1, heads=2))


@pytest.fixture(params=core.kernels.available_backends())
def backend(request):
    return core.kernels.load_backend(request.param)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

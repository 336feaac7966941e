import numpy as np
import pytest
from hypothesis import settings

from mesasfl.data import ClientDataset, gen_synthetic
from mesasfl.model import LayeredModel, MlpArchitecture

settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")

# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


def random_model(rng, dims=(5, 4, 3)):
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        layers.append((f"W{i}", rng.normal(size=(a, b))))
        layers.append((f"b{i}", rng.normal(size=b)))
    return LayeredModel(layers)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blobs():
    return gen_synthetic(class_count=4, feature_dim=6, per_class=40, spread=0.3, rng_seed=7)


@pytest.fixture(scope="session")
def small_arch():
    return MlpArchitecture(6, (8,), 4)

import numpy as np
import pytest

from toolpresence.network import BackboneSpec, ConvLayer, ModelSpec, reduced_backbone
from toolpresence.synthetic_bench import SyntheticConfig, generate_arrays

ACCEPTANCE_RESULTS = []


def record_acceptance(number, title, passed, detail=""):
    ACCEPTANCE_RESULTS.append((number, title, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number}. {title}  {detail}".rstrip())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_endonet_spec():
    return ModelSpec(
        variant="EndoNet",
        phase_count=3,
        input_shape=(3, 6, 6),
        backbone=BackboneSpec(convs=(ConvLayer(2, 3),), fc_dims=(4,), global_pool="max"),
        pixel_mean=(0.0, 0.0, 0.0),
    )


@pytest.fixture
def linear_spec():
    """No hidden layers: fc_tool sees the flattened input directly."""
    return ModelSpec(input_shape=(3, 2, 2), backbone=BackboneSpec(), pixel_mean=(0.0, 0.0, 0.0))


@pytest.fixture
def reduced_spec():
    return ModelSpec(input_shape=(3, 32, 32), backbone=reduced_backbone())


@pytest.fixture(scope="session")
def small_synthetic():
    return generate_arrays(SyntheticConfig(frames_per_video=20, video_count=3, seed=5))

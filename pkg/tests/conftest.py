import numpy as np
import pytest

from osvda.data import SynthConfig, reset_target_label_reads, synth_dataset
from osvda.network import ModelDims


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    cfg = SynthConfig(K=3, num_private=2, D=4, c=3, samples_per_class=8, seed=7)
    return synth_dataset(cfg)


@pytest.fixture
def small_dims():
    return ModelDims(D=4, c=3, H=8, F=6, P=5, K=3)


@pytest.fixture(autouse=True)
def _fresh_label_counter():
    reset_target_label_reads()
    yield


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[key])

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gtmancer.dataio import SynthSpec, synth_generate

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    return synth_generate(SynthSpec(n=30, m=2, c=3, dims=(5, 4), cluster_separation=5.0,
                                    noise_sigma=0.5, seed=3))



def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])

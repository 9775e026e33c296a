import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ssnn.generative import GenerativeParams
from ssnn.inference import InferenceParams

settings.register_profile("ssnn", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ssnn")


def make_params(K=3, M=3, m=2, h=4, e=3, q=3, seed=0, self_transitions=True):
    rng = np.random.default_rng(seed)
    theta = GenerativeParams.initialize(K, M, m, h, rng, self_transitions)
    phi = InferenceParams.initialize(K, M, m, e, q, rng)
    return theta, phi


@pytest.fixture
def tiny():
    return make_params()


ACCEPTANCE: dict[str, str] = {}


def record(criterion: str, ok: bool, detail: str) -> bool:
    """Store and print one pass/fail line for an acceptance criterion."""
    line = f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
            terminalreporter.write_line(ACCEPTANCE[key])

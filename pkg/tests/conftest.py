import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lifelong_distill.policy import Policy, PolicyConfig
from lifelong_distill.sim import collect_demos, make_suite

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SMALL = PolicyConfig(latent_dim=16, context_len=2, gmm_components=2, encoder_hidden=16, ffn_hidden=16)


@pytest.fixture
def small_config():
    return SMALL


@pytest.fixture
def small_policy():
    return Policy.create(SMALL, 3)


@pytest.fixture(scope="session")
def object_suite():
    return make_suite("object", 3, 100)


@pytest.fixture(scope="session")
def object_demos(object_suite):
    return {t.task_id: collect_demos(t, 4, 7) for t in object_suite.tasks}


def random_obs(rng, B, L):
    """Observation windows with values in [-1, 1]."""
    from lifelong_distill.sim import OBS_DIM
    return rng.uniform(-1.0, 1.0, (B, L, OBS_DIM))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from screamfuse.sim import ChannelModel, SimConfig
from screamfuse.trace_model import ChannelMeta

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

KEY = bytes(range(16))
ACCEPTANCE_LINES = []


def channel(label="c0", freq=2.45e9, **kw):
    return ChannelModel(ChannelMeta(freq, label), **kw)


def sim_config(channels=None, n=200, **kw):
    if channels is None:
        channels = [channel()]
    kw.setdefault("key", KEY)
    return SimConfig(channels=channels, n_plaintexts=n, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

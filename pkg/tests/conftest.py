import numpy as np
import pytest

from agentask.core import RewardConfig
from agentask.env import Environment, EnvConfig
from agentask.pipeline import corpus_seeds
from agentask.sft import SFTConfig, build_corpus, train_sft

# Lines appended by tests/test_acceptance.py, echoed in the terminal summary so
# they show up without -s.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def env():
    return Environment()


@pytest.fixture(scope="session")
def reward_cfg():
    return RewardConfig()


@pytest.fixture(scope="session")
def corpus(env):
    return build_corpus(env, corpus_seeds(0, 400))


@pytest.fixture(scope="session")
def sft_params(corpus):
    return train_sft(corpus, SFTConfig(seed=0)).params


@pytest.fixture(scope="session")
def single_edge_env():
    from agentask.env import TAXONOMY_S3

    return Environment(EnvConfig(chain_length_range=(2, 2), injection_probabilities=TAXONOMY_S3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

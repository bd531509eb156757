import numpy as np
import pytest

from icf.environments import EnvConfig, GridWorld
from icf.models import ModelConfig, build_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def basic_env():
    return GridWorld(EnvConfig())


@pytest.fixture
def extended_env():
    return GridWorld(EnvConfig(variant="extended"))


@pytest.fixture
def small_basic_env():
    return GridWorld(EnvConfig(grid_height=5, grid_width=5))


@pytest.fixture
def shared_model():
    return build_model(ModelConfig(variant="shared", obs_shape=(1, 10, 10), seed=3))


@pytest.fixture
def small_shared_model():
    return build_model(ModelConfig(variant="shared", obs_shape=(1, 5, 5), conv_channels=3,
                                   fc_units=6, seed=3))


def separate_model(n_features=4, seed=5, randomize_policies=True, hidden=16):
    model = build_model(ModelConfig(variant="separate", obs_shape=(1, 10, 10), n_features=n_features,
                                    num_actions=8, hidden_units=hidden, seed=seed))
    if randomize_policies:
        r = np.random.default_rng(seed + 100)
        for k in range(n_features):
            model.params[f"pi{k}.w"].data = r.normal(scale=0.5, size=model.params[f"pi{k}.w"].shape)
    return model


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])

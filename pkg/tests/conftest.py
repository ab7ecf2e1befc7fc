import numpy as np
import pytest

from objadv.advtrain import TrainConfig, train_standard
from objadv.datagen import SceneSpec, make_dataset
from objadv.detector import DetectorConfig, DetectorModel, init_params


@pytest.fixture(scope="session")
def scene_spec():
    return SceneSpec()


@pytest.fixture(scope="session")
def det_config():
    return DetectorConfig()


@pytest.fixture(scope="session")
def tiny_train(scene_spec):
    return make_dataset(scene_spec, 48, seed=1)


@pytest.fixture(scope="session")
def tiny_test(scene_spec):
    return make_dataset(scene_spec, 24, seed=50_000)


@pytest.fixture(scope="session")
def fresh_model(det_config):
    return DetectorModel(det_config, init_params(det_config, seed=3))


@pytest.fixture(scope="session")
def trained_model(tiny_train, det_config):
    """A few epochs on a small set: enough for non-trivial gradients and detections."""
    return train_standard(tiny_train, TrainConfig(epochs=6, seed=0), det_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import numpy as np
import pytest

from app.models.density import Grid
from app.models.potential import make_gaussian_mixture, make_quadratic
from app.services.experiment_config import load_experiment_config


@pytest.fixture
def quadratic():
    return make_quadratic(1.0, 1)


@pytest.fixture
def mixture():
    return make_gaussian_mixture(np.array([2.0]), 1.0)


@pytest.fixture
def grid():
    return Grid.uniform(-12.0, 12.0, 2401)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def experiment_config(tmp_path):
    """Build an ExperimentConfig writing into tmp_path with plots off"""

    def build(**overrides):
        values = {'output.dir': str(tmp_path / 'out'), 'output.plot': 'false', 'run.wallclock': 'false'}
        values.update({key.replace('__', '.'): str(value) for key, value in overrides.items()})
        return load_experiment_config(None, values)

    return build

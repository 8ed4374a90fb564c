import os

import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

DATA = os.path.join(os.path.dirname(__file__), "data")


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def data_dir():
    return DATA


TINY = dict(train_scenes=4, epochs=1, baseline_epochs=1, batch=2)


@pytest.fixture(scope="session")
def tiny_run():
    from mpda.training import TrainingConfig, train

    return train(TrainingConfig(**TINY))

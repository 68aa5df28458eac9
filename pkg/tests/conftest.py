import os
import sys

import hypothesis
import numpy as np
import pytest
from loguru import logger

from uqbench.datasets import make_two_moons, two_moons_ood
from uqbench.schemas import SweepData, TrainConfig

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("default", max_examples=100, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(autouse=True)
def reset_logging():
    yield
    logger.remove()
    logger.add(sys.stderr, level="WARNING")


@pytest.fixture
def log_messages():
    messages: list[str] = []
    handler_id = logger.add(lambda m: messages.append(m.record["message"]), level="DEBUG")
    yield messages
    logger.remove(handler_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def moons() -> SweepData:
    return SweepData(
        train=make_two_moons(60, seed=1),
        test=make_two_moons(40, seed=2),
        ood=two_moons_ood(80, seed=3),
    )


@pytest.fixture
def quick_train() -> TrainConfig:
    return TrainConfig(epochs=3, batch_size=16, seed=7)

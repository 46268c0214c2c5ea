import hypothesis
import numpy as np
import pytest

from berrypick.config import RootConfig
from berrypick.core.kinematics import ArmModel

np.seterr(all="warn")

hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile("ci")


@pytest.fixture
def config() -> RootConfig:
    return RootConfig()


@pytest.fixture
def model(config) -> ArmModel:
    return ArmModel.from_config(config.arm)

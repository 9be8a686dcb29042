import numpy as np
import pytest

from dualfilter import CIRModel, CIRParams, WFModel, WFParams


@pytest.fixture
def cir_params():
    # benchmark CIR parameterization used throughout the scenarios
    return CIRParams(delta=11.0, gamma=1.1, sigma=1.0, tau=1.0)


@pytest.fixture
def cir_model(cir_params):
    return CIRModel(cir_params)


@pytest.fixture
def wf3_params():
    return WFParams((1.1, 1.1, 1.1))


@pytest.fixture
def wf3_model(wf3_params):
    return WFModel(wf3_params)


@pytest.fixture
def wf2_params():
    return WFParams((1.1, 1.9))


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)

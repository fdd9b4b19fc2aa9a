import numpy as np
import pytest

from qndspin.physmodel import MeasurementModel, PhysicalParams, RelaxationRates, SystemModel, field_for_larmor


def make_system(larmor_hz=1000.0, t1=200.0, t2=1800.0, g=1.567e-12, eta=0.8, flux=4e15,
                delta=5e-6, n_rb=3.6e14, direction=(1.0, 1.0, 1.0)):
    p = PhysicalParams(n_rb=n_rb)
    b = field_for_larmor(p, larmor_hz, direction)
    return SystemModel(p, tuple(b), RelaxationRates(t1, t2), MeasurementModel(g, eta, flux, delta))


@pytest.fixture
def system():
    return make_system()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

import numpy as np
import pytest

from concave_lottery.data import MnistSubsetSpec, make_subset
from concave_lottery.experiments import load_mnist
from concave_lottery.models import LabeledDataset
from concave_lottery.numerics import make_rng


@pytest.fixture(scope="session")
def mnist():
    return load_mnist()


@pytest.fixture(scope="session")
def digits01(mnist):
    return make_subset(mnist, MnistSubsetSpec.digits01_split(), make_rng(0))


@pytest.fixture
def rng():
    return make_rng(12345)


@pytest.fixture
def toy_separable():
    # four points split by the first coordinate
    X = np.array([[1.0, 0.2], [2.0, -0.3], [-1.0, 0.1], [-2.0, -0.4]])
    y = np.array([1, 1, 0, 0])
    return LabeledDataset(X, y)

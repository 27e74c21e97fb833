import numpy as np
import pytest

from hmtgrasp.autograd import Tensor


def rand_tensor(rng, *shape, requires_grad=False):
    return Tensor(rng.normal(size=shape), requires_grad=requires_grad, dtype=np.float64)


def weighted_sum(fn, weights):
    """Scalarize ``fn`` with fixed random weights so no gradient is structurally zero."""
    from hmtgrasp import autograd as ag

    def f(x):
        return ag.sum_all(ag.mul(fn(x), Tensor(weights)))
    return f


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

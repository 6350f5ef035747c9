"""Shared helpers: central finite differences and small synthetic fixtures."""

import numpy as np
import pytest
from hypothesis import settings

from timekernel import autodiff as ad
from timekernel.autodiff import Tape, Tensor

FD_STEP = 1e-5

# Fixed example generation keeps the suite reproducible run to run.
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


def numeric_grad(fn, arrays, step=FD_STEP):
    """Central differences of the scalar ``fn(*arrays)`` w.r.t. every array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            up = fn(*arrays)
            arr[idx] = orig - step
            down = fn(*arrays)
            arr[idx] = orig
            g[idx] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def analytic_grad(build, arrays):
    """Gradients of ``build(*tensors)`` (a scalar Tensor) via the tape."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    tape = Tape()
    with tape:
        loss = build(*tensors)
    tape.backward(loss)
    return [t.grad for t in tensors]


def assert_grad_matches(build, arrays, rtol=1e-4, atol=1e-7):
    """Compare tape gradients of ``build`` with central differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def value(*xs):
        return float(build(*[Tensor(x) for x in xs]).data)

    expected = numeric_grad(value, arrays)
    got = analytic_grad(build, arrays)
    for i, (g, e) in enumerate(zip(got, expected)):
        np.testing.assert_allclose(g, e, rtol=rtol, atol=atol, err_msg=f"input {i}")


def weighted_sum(out, weights):
    """Scalar probe ``sum(out * weights)`` so every output entry is exercised."""
    return ad.sum_(ad.mul(out, Tensor(weights)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

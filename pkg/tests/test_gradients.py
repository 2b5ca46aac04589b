import numpy as np
import pytest

from hollowconv.gradcheck import check_gradients, numerical_grad
from hollowconv.tensor import Tensor, precision
from oracles import GRADIENT_CASES, GRADIENT_SAMPLING


@pytest.mark.parametrize("name", sorted(GRADIENT_CASES))
def test_op_gradient_matches_central_differences(name):
    # five instances here; the acceptance suite runs twenty
    build = GRADIENT_CASES[name]
    with precision(np.float64):
        for i in range(5):
            rng = np.random.default_rng([11, i])
            f, inputs = build(rng)
            err = check_gradients(f, inputs, max_entries=GRADIENT_SAMPLING.get(name), seed=i)
            assert err < 1e-4, f"{name} instance {i}: relative error {err:.2e}"


def test_numerical_grad_on_non_contiguous_input(f64):
    base = np.arange(12.0).reshape(3, 4)
    t = Tensor(base.T, requires_grad=True)
    g = numerical_grad(lambda: (t * t).sum(), t)
    assert np.allclose(g, 2 * base.T, atol=1e-6)


def test_check_flags_a_wrong_gradient(f64):
    x = Tensor(np.linspace(1.0, 2.0, 50), requires_grad=True)
    assert check_gradients(lambda: (x * x).sum(), [x], max_entries=5) < 1e-6
    # the second factor is read as a constant, so backprop sees half the true slope
    assert check_gradients(lambda: (x * Tensor(x.data.copy())).sum(), [x]) > 0.1
    with pytest.raises(ValueError, match="float64"):
        check_gradients(lambda: x.sum(), [Tensor(np.ones(2, dtype=np.float32), requires_grad=True)])

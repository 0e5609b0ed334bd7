import numpy as np
import pytest

from skillspace import autodiff as ad
from skillspace.autodiff import Tensor

from .oracles import finite_difference_grads, max_rel_grad_error


def _leaf(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _check_op(build, params, tol=1e-3):
    def loss():
        return float(build().value)

    out = build()
    for p in params.values():
        p.zero_grad()
    out.backward()
    analytic = {k: p.grad_or_zero() for k, p in params.items()}
    numeric = finite_difference_grads(loss, params)
    assert max_rel_grad_error(analytic, numeric) < tol


@pytest.mark.parametrize(
    "name",
    ["add", "sub", "mul", "div", "matmul", "exp", "log_abs", "tanh", "relu", "elu",
     "square", "sqrt_abs", "sum_axis", "mean", "concat", "slice", "clip", "log_softmax"],
)
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**31)
    a = _leaf(rng, (3, 4))
    b = _leaf(rng, (3, 4))
    w = _leaf(rng, (4, 2))
    params = {"a": a, "b": b, "w": w}
    # fixed weighting tensor: kept out of params so FD never perturbs it
    weights = Tensor(rng.standard_normal((3, 4)))

    builders = {
        "add": lambda: ad.tsum(ad.add(a, b)),
        "sub": lambda: ad.tsum(ad.sub(a, b)),
        "mul": lambda: ad.tsum(ad.mul(a, b)),
        "div": lambda: ad.tsum(ad.div(a, ad.add(ad.square(b), 1.0))),
        "matmul": lambda: ad.tsum(ad.matmul(a, w)),
        "exp": lambda: ad.tsum(ad.exp(ad.mul(a, 0.3))),
        "log_abs": lambda: ad.tsum(ad.log(ad.add(ad.square(a), 0.5))),
        "tanh": lambda: ad.tsum(ad.tanh(a)),
        "relu": lambda: ad.tsum(ad.relu(ad.add(a, 0.05))),
        "elu": lambda: ad.tsum(ad.elu(a)),
        "square": lambda: ad.tsum(ad.square(a)),
        "sqrt_abs": lambda: ad.tsum(ad.sqrt(ad.add(ad.square(a), 0.1))),
        "sum_axis": lambda: ad.tsum(ad.square(ad.tsum(a, axis=1))),
        "mean": lambda: ad.tmean(ad.mul(a, b)),
        "concat": lambda: ad.tsum(ad.square(ad.concat([a, b], axis=1))),
        "slice": lambda: ad.tsum(ad.square(a[:, 1:3])),
        "clip": lambda: ad.tsum(ad.clip(a, -0.5, 0.5)),
        "log_softmax": lambda: ad.tsum(ad.mul(ad.log_softmax(a, axis=-1), weights)),
    }
    _check_op(builders[name], params)


def test_loss_sum_of_params_gives_unit_gradients():
    p = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.tsum(p).backward()
    assert np.array_equal(p.grad, np.ones((2, 3)))


def test_unreached_parameter_has_zero_gradient():
    used = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(3), requires_grad=True)
    ad.tsum(ad.square(used)).backward()
    assert np.array_equal(unused.grad_or_zero(), np.zeros(3))


def test_backward_requires_scalar():
    t = Tensor(np.ones(4), requires_grad=True)
    with pytest.raises(ad.AutodiffError):
        ad.square(t).backward()


def test_matmul_shape_mismatch_is_descriptive():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((4, 2)))
    with pytest.raises(ad.AutodiffError, match="shape mismatch"):
        ad.matmul(a, b)


def test_gradient_accumulates_across_shared_subexpression():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = ad.mul(x, x)  # x^2, dx = 2x
    z = ad.add(y, ad.mul(x, 3.0))  # x^2 + 3x
    z.backward()
    assert np.isclose(x.grad, 2 * 2.0 + 3.0)


def test_float32_graph_stays_float32():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    out = ad.tmean(ad.exp(ad.mul(ad.add(x, 1.5), -0.25)))
    assert out.dtype == np.float32
    out.backward()
    assert x.grad.dtype == np.float32


def test_broadcast_bias_gradient():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((5, 3)))
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    ad.tsum(ad.square(ad.add(x, b))).backward()
    expected = (2 * (x.value + b.value)).sum(axis=0)
    assert np.allclose(b.grad, expected)

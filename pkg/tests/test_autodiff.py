import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from muc import autodiff as ad
from muc.autodiff import NonFiniteError, Tensor, tensor
from muc.nn import check_gradients


def leaf(shape, seed=0, scale=1.0):
    return tensor(np.random.default_rng(seed).normal(0, scale, shape), requires_grad=True)


def test_sum_gradient_is_ones():
    x = leaf((3, 4))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_square_gradient():
    x = tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_double_backward_raises():
    x = tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_non_scalar_root_raises():
    x = tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2).backward()


def test_gradients_accumulate_across_graphs():
    x = tensor([1.0, -1.0], requires_grad=True)
    x.sum().backward()
    (x * 3).sum().backward()
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])


def test_nan_in_forward_is_detected():
    x = tensor([-1.0, 1.0], requires_grad=True)
    with pytest.raises(NonFiniteError):
        ad.log(x)


def test_nan_in_backward_is_detected():
    x = tensor([0.0, 1.0], requires_grad=True)
    y = ad.sqrt(x)
    with pytest.raises(NonFiniteError):
        y.sum().backward()


def test_no_grad_records_nothing():
    x = tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 2
    assert not y.requires_grad
    assert ad.grad_enabled()


def test_numpy_left_operand_dispatches_to_tensor():
    x = tensor(np.ones((3, 3)), requires_grad=True)
    y = np.eye(3) + x
    assert isinstance(y, Tensor)
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 3)))


@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)))
def test_softmax_sums_to_one(z):
    p = ad.softmax(tensor(z), axis=-1).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    lp = ad.log_softmax(tensor(z), axis=0).data
    np.testing.assert_allclose(np.exp(lp).sum(0), 1.0, atol=1e-12)


def test_softmax_shift_invariance_exact():
    z = np.random.default_rng(3).normal(size=(6, 4))
    a = ad.softmax(tensor(z), axis=0).data
    b = ad.softmax(tensor(z + 7.0), axis=0).data
    np.testing.assert_allclose(a, b, atol=1e-15)


# -- finite-difference agreement per op ---------------------------------------
def _unary(fn, shift=0.0):
    def case():
        x = leaf((3, 4), 1)
        if shift:
            x.data = np.abs(x.data) + shift
        w = np.random.default_rng(9).normal(size=(3, 4))
        return (lambda: (fn(x) * w).sum()), {"x": x}
    return case


def _binary(fn):
    def case():
        a, b = leaf((3, 4), 1), leaf((1, 4), 2)
        b.data = np.abs(b.data) + 0.5
        w = np.random.default_rng(9).normal(size=(3, 4))
        return (lambda: (fn(a, b) * w).sum()), {"a": a, "b": b}
    return case


def _matmul():
    a, b = leaf((2, 3, 4), 1), leaf((4, 5), 2)
    return (lambda: ad.tanh(a @ b).sum()), {"a": a, "b": b}


def _conv(stride, padding):
    def case():
        x, w, b = leaf((2, 3, 6, 6), 1), leaf((4, 3, 3, 3), 2), leaf((4,), 3)
        g = np.random.default_rng(9)
        out_shape = ad.conv2d(x.detach(), w.detach(), b.detach(), stride, padding).shape
        r = g.normal(size=out_shape)
        return (lambda: (ad.conv2d(x, w, b, stride, padding) * r).sum()), {"x": x, "w": w, "b": b}
    return case


def _indexing():
    x = leaf((5, 4), 1)
    idx = np.array([0, 2, 2, 4])
    return (lambda: (x[idx, 1:] ** 2).sum() + ad.stack([x[0], x[3]]).sum()), {"x": x}


def _pooling():
    x = leaf((1, 2, 8, 8), 1)
    r = np.random.default_rng(9).normal(size=(1, 2, 4, 4))
    return (lambda: (ad.avg_pool(ad.upsample_nearest(x, 2), 4) * r).sum()), {"x": x}


def _softmaxes():
    x = leaf((3, 5), 1)
    r = np.random.default_rng(9).normal(size=(3, 5))
    return (lambda: (ad.softmax(x, 0) * r).sum() + (ad.log_softmax(x, -1) * r).sum()), {"x": x}


def _reductions():
    x = leaf((3, 4, 2), 1)
    return (lambda: (x.mean(axis=1) ** 3).sum() + ad.concat([x, x * 2], axis=2).sum(axis=(0, 2)).sum()
            + x.transpose(2, 0, 1).reshape(2, -1)[1].sum()), {"x": x}


CASES = {
    "exp": _unary(ad.exp), "log": _unary(ad.log, 0.3), "sqrt": _unary(ad.sqrt, 0.3), "sin": _unary(ad.sin),
    "cos": _unary(ad.cos), "tanh": _unary(ad.tanh), "sigmoid": _unary(ad.sigmoid), "gelu": _unary(ad.gelu),
    "softplus": _unary(ad.softplus), "relu": _unary(ad.relu), "abs": _unary(ad.tabs, 0.1),
    "pow": _unary(lambda x: x ** 3), "add": _binary(lambda a, b: a + b), "sub": _binary(lambda a, b: a - b),
    "mul": _binary(lambda a, b: a * b), "div": _binary(lambda a, b: a / b),
    "where": _binary(lambda a, b: ad.where(a.data > 0, a, b)), "matmul": _matmul,
    "conv_s1p1": _conv(1, 1), "conv_s2p1": _conv(2, 1), "conv_s1p0": _conv(1, 0),
    "indexing": _indexing, "pool_upsample": _pooling, "softmax": _softmaxes, "reductions": _reductions,
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients_match_central_differences(name):
    fn, params = CASES[name]()
    errs = check_gradients(fn, params, step=1e-5, max_coords=60)
    assert max(errs.values()) < 1e-6, errs

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stvis import tensor as tn
from stvis.tensor import Tape, Tensor

from conftest import autodiff, fd_grad, rel_err


def test_add_small_vectors():
    assert np.array_equal(tn.add([1, 2], [3, 4]).data, [4, 6])


def test_mul_by_ones_is_identity(rng):
    x = rng.normal(size=(3, 5))
    assert np.array_equal(tn.mul(x, np.ones_like(x)).data, x)


def test_elementwise_dispatch_and_shape_error():
    assert np.array_equal(tn.elementwise("sub", [5.0], [2.0]).data, [3.0])
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        tn.add(np.ones(2), np.ones(3))
    with pytest.raises(ValueError):
        tn.elementwise("pow", [1.0], [1.0])


def test_grad_of_sum_of_product_matches_fd(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    ga, _ = autodiff(lambda x, y: (x * y).sum(), a, b)
    assert np.array_equal(ga, b)
    fd = fd_grad(lambda x: float((x * b).sum()), a)
    assert rel_err(ga, fd) < 1e-7


def test_broadcast_backward_sums_over_broadcast_dims(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(1, 3))
    _, gb = autodiff(lambda x, y: (x * y).sum(), a, b)
    assert gb.shape == (1, 3)
    assert np.allclose(gb, a.sum(axis=0, keepdims=True))


def test_matmul_examples(rng):
    x = rng.normal(size=(3, 4))
    assert np.array_equal(tn.matmul(np.eye(3), x).data, x)
    assert np.array_equal(tn.matmul([[1, 2], [3, 4]], [[5], [6]]).data, [[17], [39]])
    with pytest.raises(ValueError, match="inner"):
        tn.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradient_vs_fd(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    w = rng.normal(size=(4, 3))
    ga, gb = autodiff(lambda x, y: (tn.matmul(x, y) * w).sum(), a, b)
    assert rel_err(ga, fd_grad(lambda x: float(((x @ b) * w).sum()), a)) < 1e-7
    assert rel_err(gb, fd_grad(lambda y: float(((a @ y) * w).sum()), b)) < 1e-7


def test_softmax_examples():
    assert np.array_equal(tn.softmax([0.0, 0.0]).data, [0.5, 0.5])
    assert np.array_equal(tn.softmax([1000.0, 1000.0]).data, [0.5, 0.5])
    x = [1.0, 2.0, 3.0]
    denom = 0.0
    for v in x:
        denom += np.exp(v)
    expected = [np.exp(v) / denom for v in x]
    assert np.allclose(tn.softmax(x).data, expected, rtol=0, atol=1e-15)


def test_softmax_sums_to_one_at_extreme_magnitudes(rng):
    for _ in range(1000):
        x = rng.uniform(-1e4, 1e4, size=rng.integers(1, 9))
        out = tn.softmax(x).data
        assert np.all(np.isfinite(out))
        assert abs(out.sum() - 1.0) < 1e-9


def test_backward_simple_cases(rng):
    x = rng.normal(size=(3, 2))
    (g,) = autodiff(lambda t: t.sum(), x)
    assert np.array_equal(g, np.ones_like(x))
    (g,) = autodiff(lambda t: (t * t).sum(), x)
    assert np.array_equal(g, 2 * x)


def test_unused_leaf_gets_zero_grad(rng):
    a, b = Tensor(rng.normal(size=3), True), Tensor(rng.normal(size=2), True)
    with Tape() as tape:
        loss = (a * a).sum()
    tape.backward(loss, [a, b])
    assert np.array_equal(b.grad, np.zeros(2))


def test_tape_contract_errors(rng):
    a = Tensor(rng.normal(size=3), True)
    with Tape() as tape:
        loss = (a * a).sum()
        vec = a * 2.0
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(vec)
    other = Tape()
    with pytest.raises(ValueError, match="not produced"):
        other.backward(loss)
    tape.backward(loss)
    with pytest.raises(RuntimeError, match="consumed"):
        tape.backward(loss)


def test_no_tape_means_no_recording(rng):
    a = Tensor(rng.normal(size=3), True)
    out = (a * 2.0).sum()
    assert not out.requires_grad


def test_tape_records_in_topological_order(rng):
    a = Tensor(rng.normal(size=3), True)
    with Tape() as tape:
        b = a * 2.0
        c = tn.exp(b)
        d = c.sum()
    produced = [rec[0] for rec in tape.records]
    assert produced == [b, c, d]


def test_gradient_accumulates_over_reuse(rng):
    x = rng.normal(size=4)
    (g,) = autodiff(lambda t: (t * t).sum() + t.sum() * 3.0, x)
    assert np.allclose(g, 2 * x + 3.0)


@pytest.mark.parametrize("name,fn,make", [
    ("exp", tn.exp, lambda r: r.normal(size=5)),
    ("log", tn.log, lambda r: r.uniform(0.5, 2, size=5)),
    ("sqrt", tn.sqrt, lambda r: r.uniform(0.5, 2, size=5)),
    ("sigmoid", tn.sigmoid, lambda r: r.normal(size=5)),
    ("softplus", tn.softplus, lambda r: r.normal(size=5)),
    ("gelu", tn.gelu, lambda r: r.normal(size=5)),
    ("l2_normalize", lambda t: tn.l2_normalize(t.reshape(1, 5)), lambda r: r.normal(size=5)),
    ("log_softmax", tn.log_softmax, lambda r: r.normal(size=5)),
])
def test_unary_gradients_vs_fd(rng, name, fn, make):
    x = make(rng)
    w = rng.normal(size=5)
    (g,) = autodiff(lambda t: (fn(t).reshape(5) * w).sum(), x)
    fd = fd_grad(lambda v: float((fn(Tensor(v)).data.reshape(5) * w).sum()), x)
    assert rel_err(g, fd) < 1e-7, name


def test_layer_norm_gradient_vs_fd(rng):
    x, gamma, beta = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)
    w = rng.normal(size=(3, 6))
    grads = autodiff(lambda a, b, c: (tn.layer_norm(a, b, c) * w).sum(), x, gamma, beta)
    for i, arr in enumerate((x, gamma, beta)):
        def f(v, i=i):
            args = [x, gamma, beta]
            args[i] = v
            return float((tn.layer_norm(*args).data * w).sum())
        assert rel_err(grads[i], fd_grad(f, arr)) < 1e-7


def test_power_zero_exponent_has_zero_grad(rng):
    x = rng.normal(size=3)
    (g,) = autodiff(lambda t: (t ** 0.0).sum() + t.sum(), x)
    assert np.array_equal(g, np.ones(3))


def test_l2_normalize_zero_vector_maps_to_zero():
    out = tn.l2_normalize(np.zeros((1, 4))).data
    assert np.array_equal(out, np.zeros((1, 4)))


def test_getitem_backward_handles_repeated_indices(rng):
    x = rng.normal(size=4)
    (g,) = autodiff(lambda t: t[np.array([0, 0, 2])].sum(), x)
    assert np.array_equal(g, [2.0, 0.0, 1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one_property(x):
    out = tn.softmax(x, axis=-1).data
    assert np.all(out >= 0)
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 3)),
              elements=st.floats(-10, 10, allow_nan=False)),
       arrays(np.float64, st.tuples(st.just(1), st.integers(1, 3)),
              elements=st.floats(-10, 10, allow_nan=False)))
def test_broadcast_add_grad_shapes_property(a, b):
    if a.shape[1] != b.shape[1]:
        b = np.resize(b, (1, a.shape[1]))
    ga, gb = autodiff(lambda x, y: (x + y).sum(), a, b)
    assert ga.shape == a.shape and gb.shape == b.shape
    assert np.allclose(gb, a.shape[0])

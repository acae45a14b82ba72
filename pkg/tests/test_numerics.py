import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nilmtx import numerics as nx
from nilmtx.errors import ConfigError, DimensionError, EvaluationError, GeometryError
from nilmtx.numerics import RngStream, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def probe(out_shape, rng):
    """Random projection so every coordinate gets an O(1) gradient."""
    return rng.normal(size=out_shape)


def test_matmul_examples():
    out = nx.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3], [4]]))
    np.testing.assert_array_equal(out.data, [[3], [4]])
    assert nx.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_of_sum_is_ones_times_bt(rng):
    a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=(5, 3)))
    nx.backward(nx.sum_all(nx.matmul(a, b)))
    np.testing.assert_allclose(a.grad, np.ones((4, 3)) @ b.data.T)
    assert nx.grad_check(lambda: nx.sum_all(nx.matmul(a, b)), [a]) <= 1e-6


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])
    np.testing.assert_allclose(nx.softmax_rows(Tensor([[0.0, math.log(2)]])).data, [[1 / 3, 2 / 3]])
    out = nx.softmax_rows(Tensor([[1000.0, 1000.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[0.5, 0.5]])


@settings(max_examples=50, deadline=None)
@given(
    st.integers(1, 6),
    st.integers(1, 9),
    st.floats(0.1, 50.0),
    st.integers(0, 2**32 - 1),
)
def test_softmax_rows_are_stochastic(m, n, spread, seed):
    x = np.random.default_rng(seed).normal(scale=spread, size=(m, n))
    y = nx.softmax_rows(Tensor(x)).data
    assert np.all(np.abs(y.sum(axis=1) - 1) <= 1e-9)
    assert np.all((y > 0) | (x < x.max(axis=1, keepdims=True) - 700))
    assert np.all(y <= 1)


def test_layer_norm_examples():
    out = nx.layer_norm(Tensor([[1.0, 3.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-9)
    out = nx.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])
    with pytest.raises(ConfigError):
        nx.layer_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]), eps=0.0)


def test_layer_norm_gradients(rng):
    x = Tensor(rng.normal(size=(3, 8)))
    g = Tensor(rng.normal(size=8))
    b = Tensor(rng.normal(size=8))
    w = probe((3, 8), rng)
    assert nx.grad_check(lambda: nx.weighted_sum(nx.layer_norm(x, g, b), w), [x, g, b]) <= 1e-6


def test_conv1d_examples():
    out = nx.conv1d(Tensor([[1.0], [2.0], [3.0]]), Tensor([[[1.0]], [[1.0]]]), Tensor([0.0]), padding="valid")
    np.testing.assert_array_equal(out.data.ravel(), [3.0, 5.0])
    x = Tensor([[1.0], [2.0], [3.0]])
    np.testing.assert_array_equal(nx.conv1d(x, Tensor([[[1.0]]]), padding="same").data, x.data)


def test_conv1d_same_padding_keeps_length(rng):
    x = Tensor(rng.normal(size=(2, 16, 3)))
    assert nx.conv1d(x, Tensor(rng.normal(size=(5, 3, 4)))).shape == (2, 16, 4)
    assert nx.conv1d(x, Tensor(rng.normal(size=(4, 3, 4)))).shape == (2, 16, 4)


def test_conv1d_geometry_error():
    with pytest.raises(GeometryError):
        nx.conv1d(Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1, 1))), padding="valid")


@pytest.mark.parametrize("padding,stride", [("same", 1), ("valid", 1), ("valid", 2)])
def test_conv1d_gradients(rng, padding, stride):
    x = Tensor(rng.normal(size=(16, 2)))
    w = Tensor(rng.normal(size=(5, 2, 3)))
    b = Tensor(rng.normal(size=3))
    out_shape = nx.conv1d(x, w, b, padding, stride).shape
    p = probe(out_shape, rng)
    assert nx.grad_check(lambda: nx.weighted_sum(nx.conv1d(x, w, b, padding, stride), p), [x, w, b]) <= 1e-6


def test_pool1d_examples():
    x = Tensor([[1.0], [3.0], [2.0], [5.0]])
    np.testing.assert_array_equal(nx.pool1d(x, 2).data.ravel(), [3.0, 5.0])
    np.testing.assert_array_equal(nx.pool1d(x, 1).data, x.data)


def test_pool1d_tie_routes_to_lowest_index():
    x = Tensor([[2.0], [2.0]], requires_grad=True)
    out = nx.pool1d(x, 2)
    assert out.data.ravel().tolist() == [2.0]
    nx.backward(nx.sum_all(out))
    assert x.grad.ravel().tolist() == [1.0, 0.0]


def test_pool1d_geometry_error():
    with pytest.raises(GeometryError):
        nx.pool1d(Tensor(np.ones((5, 1))), 2)


def test_pool1d_gradients(rng):
    x = Tensor(rng.normal(size=(2, 8, 3)))
    p = probe((2, 4, 3), rng)
    assert nx.grad_check(lambda: nx.weighted_sum(nx.pool1d(x, 2), p), [x]) <= 1e-6


def test_deconv1d_examples():
    out = nx.deconv1d(Tensor([[1.0], [2.0]]), Tensor([[[1.0]], [[1.0]]]), stride=2)
    np.testing.assert_array_equal(out.data.ravel(), [1.0, 1.0, 2.0, 2.0])
    assert nx.deconv1d(Tensor([[1.0]]), Tensor([[[1.0]]]), stride=1).data.tolist() == [[1.0]]


def test_deconv1d_matches_explicit_transposed_matrix(rng):
    # brute force: build the conv matrix of the adjoint geometry and transpose it
    x = rng.normal(size=5)
    w = rng.normal(size=3)
    stride = 2
    n_out = (5 - 1) * stride + 3
    conv = np.zeros((5, n_out))
    for t in range(5):
        for j in range(3):
            conv[t, t * stride + j] = w[j]
    expected = conv.T @ x
    got = nx.deconv1d(Tensor(x[:, None]), Tensor(w[:, None, None]), stride).data.ravel()
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_deconv1d_is_adjoint_of_conv1d(rng, stride):
    x = rng.normal(size=(8, 3))
    w = rng.normal(size=(4, 3, 2))
    y = nx.deconv1d(Tensor(x), Tensor(w), stride).data
    u = rng.normal(size=y.shape)
    cu = nx.conv1d(Tensor(u), Tensor(w.transpose(0, 2, 1)), padding="valid", stride=stride).data
    assert abs(np.sum(cu * x) - np.sum(y * u)) <= 1e-10


def test_deconv1d_gradients(rng):
    x = Tensor(rng.normal(size=(2, 6, 3)))
    w = Tensor(rng.normal(size=(4, 3, 2)))
    p = probe((2, 14, 2), rng)
    assert nx.grad_check(lambda: nx.weighted_sum(nx.deconv1d(x, w, 2), p), [x, w]) <= 1e-6


def test_dropout_identity_cases():
    x = Tensor(np.arange(6.0))
    assert nx.dropout(x, 0.0, RngStream(0), training=True) is x
    assert nx.dropout(x, 0.7, RngStream(0), training=False) is x
    with pytest.raises(ConfigError):
        nx.dropout(x, 1.0, RngStream(0), training=True)


def test_dropout_statistics():
    x = Tensor(np.full(100_000, 3.0))
    out = nx.dropout(x, 0.5, RngStream(7), training=True).data
    survived = np.mean(out != 0)
    assert abs(survived - 0.5) <= 0.01
    assert abs(out.mean() - 3.0) <= 0.02 * 3.0
    np.testing.assert_array_equal(np.unique(out), [0.0, 6.0])


def test_activation_examples(rng):
    assert nx.activation(Tensor(0.0), "tanh").data == 0.0
    np.testing.assert_array_equal(nx.activation(Tensor([-3.0, 3.0]), "relu").data, [0.0, 3.0])
    with pytest.raises(ConfigError):
        nx.activation(Tensor(1.0), "swish")


def test_gelu_backward_at_fixed_points():
    x = Tensor([-2.0, -0.5, 0.0, 0.5, 2.0])
    assert nx.grad_check(lambda: nx.sum_all(nx.activation(x, "gelu")), [x]) <= 1e-6


@pytest.mark.parametrize("kind", ["tanh", "gelu", "relu"])
def test_activation_gradients(rng, kind):
    x = Tensor(rng.normal(size=(4, 5)))
    p = probe((4, 5), rng)
    assert nx.grad_check(lambda: nx.weighted_sum(nx.activation(x, kind), p), [x]) <= 1e-6


def test_grad_check_examples():
    theta = Tensor(3.0)
    assert nx.grad_check(lambda: nx.mul(theta, theta), [theta]) <= 1e-9
    assert theta.grad == pytest.approx(6.0)
    v = Tensor(np.arange(5.0))
    assert nx.grad_check(lambda: nx.sum_all(v), [v]) <= 1e-10
    np.testing.assert_array_equal(v.grad, np.ones(5))


def test_grad_check_rejects_non_finite():
    x = Tensor(np.inf)
    with pytest.raises(EvaluationError):
        nx.grad_check(lambda: nx.sum_all(x), [x])


def test_backward_accumulates_additively(rng):
    a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    loss = nx.sum_all(nx.mul(nx.matmul(a, b), nx.matmul(a, b)))
    nx.backward(loss)
    first = (a.grad.copy(), b.grad.copy())
    nx.backward(loss)
    np.testing.assert_allclose(a.grad, 2 * first[0], rtol=1e-15)
    np.testing.assert_allclose(b.grad, 2 * first[1], rtol=1e-15)


def test_tensor_used_twice_gets_summed_gradient():
    x = Tensor(2.0, requires_grad=True)
    nx.backward(nx.add(nx.mul(x, x), x))
    assert x.grad == pytest.approx(5.0)


def test_no_grad_builds_no_records():
    x = Tensor(np.ones(3), requires_grad=True)
    with nx.no_grad():
        y = nx.sum_all(nx.mul(x, x))
    assert y.record is None


def test_rng_stream_is_reproducible():
    a, b = RngStream(42), RngStream(42)
    np.testing.assert_array_equal(a.uniform(10), b.uniform(10))
    np.testing.assert_array_equal(a.normal((2, 3)), b.normal((2, 3)))
    assert a.counter == b.counter == 2
    assert not np.array_equal(RngStream(1).uniform(5), RngStream(2).uniform(5))
    # later draws do not depend on the size of earlier ones
    c, d = RngStream(9), RngStream(9)
    c.uniform(3)
    d.uniform(1000)
    np.testing.assert_array_equal(c.uniform(4), d.uniform(4))


def test_ops_are_deterministic(rng):
    x = rng.normal(size=(2, 8, 4))
    w = rng.normal(size=(3, 4, 4))

    def run():
        t = nx.conv1d(Tensor(x), Tensor(w))
        t = nx.dropout(t, 0.3, RngStream(5), training=True)
        return nx.softmax_rows(t).data

    np.testing.assert_array_equal(run(), run())

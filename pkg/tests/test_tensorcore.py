import numpy as np
import pytest

from chronoweft import tensorcore as tc
from chronoweft.errors import OptimizerError, ShapeError, ValidationError
from chronoweft.tensorcore import Tensor


def _numeric_grad(f, x, h=1e-6):
    """Central differences of scalar f over every entry of x"""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def _check_grads(op, shapes, seed, rtol=1e-5, atol=1e-7):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    out_shape = op(*[Tensor(a) for a in arrays]).shape
    weights = rng.normal(size=out_shape)

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    op(*leaves).backward(weights)

    for leaf, arr in zip(leaves, arrays):
        numeric = _numeric_grad(lambda: float((op(*[Tensor(a) for a in arrays]).data * weights).sum()), arr)
        np.testing.assert_allclose(leaf.grad, numeric, rtol=rtol, atol=atol)


PRIMITIVES = {
    "add_broadcast": (tc.add, [(4, 3), (1, 3)]),
    "sub": (tc.sub, [(4, 3), (4, 3)]),
    "mul_broadcast": (tc.mul, [(2, 4, 3), (3,)]),
    "square": (tc.square, [(5, 2)]),
    "matmul_2d": (tc.matmul, [(4, 3), (3, 5)]),
    "matmul_3d_2d": (tc.matmul, [(2, 4, 3), (3, 5)]),
    "matmul_3d_3d": (tc.matmul, [(2, 4, 3), (2, 3, 5)]),
    "transpose": (tc.transpose, [(2, 4, 3)]),
    "concat": (lambda a, b: tc.concat([a, b], axis=-1), [(3, 2), (3, 4)]),
    "sum_axis": (lambda a: tc.sum(a, axis=1), [(3, 4, 2)]),
    "mean": (lambda a: tc.mean(a, axis=-1, keepdims=True), [(3, 4)]),
    "softmax": (tc.softmax_rows, [(2, 3, 5)]),
    "layer_norm": (tc.layer_norm, [(4, 6), (6,), (6,)]),
    "dropout": (lambda a: tc.dropout(a, 0.3, rng=5), [(4, 6)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    op, shapes = PRIMITIVES[name]
    for seed in range(20):
        _check_grads(op, shapes, seed)


def test_relu_gradient_away_from_kink():
    x = np.array([[-2.0, -0.5, 0.7, 3.0]])
    t = Tensor(x, requires_grad=True)
    tc.relu(t).backward(np.ones_like(x))
    np.testing.assert_array_equal(t.grad, [[0.0, 0.0, 1.0, 1.0]])


def test_composite_directional_derivative():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 4))
    W1, W2, W3 = rng.normal(size=(4, 6)), rng.normal(size=(6, 6)), rng.normal(size=(6, 2))
    gain, bias = np.ones(6), np.zeros(6)

    def f(xv):
        h = tc.relu(tc.layer_norm(Tensor(xv) @ Tensor(W1), Tensor(gain), Tensor(bias)))
        h = tc.softmax_rows(h @ Tensor(W2))
        return float(tc.sum(tc.square(h @ Tensor(W3))).data)

    leaf = Tensor(x, requires_grad=True)
    h = tc.relu(tc.layer_norm(leaf @ Tensor(W1), Tensor(gain), Tensor(bias)))
    h = tc.softmax_rows(h @ Tensor(W2))
    tc.sum(tc.square(h @ Tensor(W3))).backward()

    v = rng.normal(size=x.shape)
    eps = 1e-6
    numeric = (f(x + eps * v) - f(x - eps * v)) / (2 * eps)
    analytic = float((leaf.grad * v).sum())
    assert abs(numeric - analytic) <= 1e-5 * max(1.0, abs(analytic))


def test_gradients_accumulate_over_shared_node():
    a = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = tc.sum(a * a + a)
    tape = y.backward()
    np.testing.assert_allclose(a.grad, 2 * a.data + 1)
    assert len(tape) == len({id(n) for n in tape.nodes})


def test_no_graph_without_requires_grad():
    out = Tensor(np.ones((2, 2))) @ Tensor(np.ones((2, 2)))
    assert not out.requires_grad
    assert out.parents == ()


def test_backward_on_non_scalar_needs_grad():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValidationError):
        (t * 2.0).backward()


# ------------------------
# Forward values
# ------------------------
def test_matmul_values():
    np.testing.assert_array_equal(tc.matmul(Tensor(np.eye(3)), Tensor(np.arange(9.0).reshape(3, 3))).data,
                                  np.arange(9.0).reshape(3, 3))
    assert tc.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data[0, 0] == 11.0


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "(2, 3)" in str(err.value)
    assert err.value.left == (2, 3) and err.value.right == (2, 3)


def test_softmax_values():
    np.testing.assert_allclose(tc.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    big = tc.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [[1.0, 0.0]], atol=1e-12)
    rows = tc.softmax_rows(Tensor(np.random.default_rng(0).normal(scale=30, size=(6, 9)))).data
    np.testing.assert_allclose(rows.sum(axis=-1), 1.0)


def test_layer_norm_values():
    gain, bias = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_array_equal(tc.layer_norm(Tensor([[2.0, 2.0, 2.0]]), gain, bias).data, [[0.0, 0.0, 0.0]])
    two = tc.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(two, [[-1.0, 1.0]], atol=1e-3)


def test_layer_norm_standardizes_rows():
    x = np.random.default_rng(1).normal(scale=100.0, size=(8, 16))
    out = tc.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)


def test_relu_values():
    np.testing.assert_array_equal(tc.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_dropout_modes():
    x = Tensor(np.ones((200, 50)))
    assert tc.dropout(x, 0.0, rng=0) is x
    assert tc.dropout(x, 0.5, rng=0, training=False) is x
    out = tc.dropout(x, 0.25, rng=0).data
    assert abs((out == 0).mean() - 0.25) < 0.02
    np.testing.assert_allclose(out[out != 0], 1 / 0.75)
    with pytest.raises(ValidationError):
        tc.dropout(x, 1.0)


# ------------------------
# Adam
# ------------------------
def test_adam_first_step():
    params = {"w": np.array([0.0])}
    state = tc.AdamState.fresh(params, lr=1e-3)
    tc.adam_step(params, {"w": np.array([1.0])}, state)
    assert params["w"][0] == pytest.approx(-0.001, rel=1e-6)
    assert state.step == 1


def test_adam_zero_gradient_leaves_params():
    params = {"w": np.array([0.3, -0.2])}
    state = tc.AdamState.fresh(params)
    tc.adam_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(params["w"], [0.3, -0.2])


def test_adam_is_deterministic():
    def run():
        params = {"a": np.ones((2, 2)), "b": np.zeros(3)}
        state = tc.AdamState.fresh(params)
        for k in range(5):
            tc.adam_step(params, {"a": np.full((2, 2), 0.1 * k), "b": np.arange(3.0)}, state)
        return params

    one, two = run(), run()
    assert one["a"].tobytes() == two["a"].tobytes()
    assert one["b"].tobytes() == two["b"].tobytes()


def test_adam_rejects_non_finite_without_moving():
    params = {"a": np.ones(2), "b": np.ones(2)}
    state = tc.AdamState.fresh(params)
    with pytest.raises(OptimizerError) as err:
        tc.adam_step(params, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, state)
    assert err.value.param == "b"
    np.testing.assert_array_equal(params["a"], [1.0, 1.0])
    assert state.step == 0


def test_adam_wrapper_over_tensors():
    w = Tensor(np.array([2.0]), requires_grad=True)
    opt = tc.Adam({"w": w}, lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        tc.sum(tc.square(w)).backward()
        opt.step()
    assert abs(w.data[0]) < 0.1

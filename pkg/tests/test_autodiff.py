import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cogbias import autodiff as ad
from cogbias.errors import GraphConsumed, NonFiniteError, NonFiniteGradient, NotScalar, ShapeError

from conftest import central_differences, max_rel_error


def grad_check(build, shapes, seed=0, scale=1.0, floor=1e-6):
    """Compare autodiff gradients of scalar ``build(nodes)`` with central differences."""
    rng = np.random.default_rng(seed)
    values = {k: rng.normal(scale=scale, size=s) for k, s in shapes.items()}
    leaves = {k: ad.parameter(v, name=k) for k, v in values.items()}
    ad.backward(build(leaves))
    analytic = {k: leaves[k].grad for k in values}

    def f(vals):
        return float(build({k: ad.constant(v) for k, v in vals.items()}).value)

    return max_rel_error(analytic, central_differences(f, values), floor)


def test_softmax_of_zeros_is_uniform():
    y = ad.softmax(ad.constant(np.zeros(3)))
    np.testing.assert_allclose(y.value, np.full(3, 1 / 3), atol=1e-15)


def test_softmax_mask_gives_exact_zero():
    y = ad.softmax(ad.constant([1.0, 2.0, 3.0]), mask=np.array([True, False, True]))
    assert y.value[1] == 0.0
    assert abs(y.value.sum() - 1) < 1e-15


def test_softmax_fully_masked_slice_rejected():
    with pytest.raises(ShapeError):
        ad.softmax(ad.constant(np.ones((2, 3))), mask=np.array([[True, True, True], [False, False, False]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_on_simplex(x):
    y = ad.softmax(ad.constant(x), axis=-1).value
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)


def test_matmul_identity():
    X = np.random.default_rng(1).normal(size=(3, 5))
    np.testing.assert_array_equal(ad.matmul(ad.constant(np.eye(3)), ad.constant(X)).value, X)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((4, 2))))


def test_sum_gradient_is_ones():
    x = ad.parameter(np.arange(4.0))
    ad.backward(ad.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones(4))


def test_half_squared_norm_gradient_is_x():
    v = np.array([1.5, -2.0, 0.25])
    x = ad.parameter(v)
    ad.backward(ad.mul(ad.sum_(ad.mul(x, x)), ad.constant(0.5)))
    np.testing.assert_allclose(x.grad, v, rtol=0, atol=1e-15)


def test_sum_tanh_wx_matches_finite_differences():
    x = np.random.default_rng(3).normal(size=(5,))
    err = grad_check(lambda p: ad.sum_(ad.tanh(ad.matmul(p["W"], ad.constant(x[:, None])))), {"W": (4, 5)})
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_three_layer_composition(seed):
    x = np.random.default_rng(100 + seed).normal(size=(6, 4))

    def build(p):
        h = ad.tanh(ad.add(ad.matmul(ad.constant(x), p["W1"]), p["b1"]))
        h = ad.sigmoid(ad.matmul(h, p["W2"]))
        probs = ad.softmax(ad.matmul(h, p["W3"]), axis=-1)
        return ad.sum_(ad.log(ad.gather(probs, np.array([0, 1, 2, 0, 1, 2]))))

    err = grad_check(build, {"W1": (4, 5), "b1": (5,), "W2": (5, 5), "W3": (5, 3)}, seed=seed)
    assert err < 1e-4


PRIMITIVES = {
    "add": (lambda p: ad.add(p["a"], p["b"]), {"a": (3, 4), "b": (4,)}),
    "sub": (lambda p: ad.sub(p["a"], p["b"]), {"a": (3, 4), "b": (3, 4)}),
    "mul": (lambda p: ad.mul(p["a"], p["b"]), {"a": (3, 4), "b": (1, 4)}),
    "matmul_3d": (lambda p: ad.matmul(p["a"], p["b"]), {"a": (2, 3, 4), "b": (4, 2)}),
    "tanh": (lambda p: ad.tanh(p["a"]), {"a": (3, 4)}),
    "sigmoid": (lambda p: ad.sigmoid(p["a"]), {"a": (3, 4)}),
    "softmax_axis0": (lambda p: ad.softmax(p["a"], axis=0), {"a": (3, 4)}),
    "softmax_masked": (lambda p: ad.softmax(p["a"], mask=np.array([True, False, True, True])), {"a": (3, 4)}),
    "reshape": (lambda p: ad.reshape(p["a"], (4, 3)), {"a": (3, 4)}),
    "broadcast_to": (lambda p: ad.broadcast_to(p["a"], (2, 3, 4)), {"a": (3, 1)}),
    "concat": (lambda p: ad.concat([p["a"], p["b"]], axis=0), {"a": (3, 4), "b": (2, 4)}),
    "slice": (lambda p: ad.slice_(p["a"], (slice(None), slice(1, 3))), {"a": (3, 4)}),
    "sum_axis": (lambda p: ad.sum_(p["a"], axis=1), {"a": (3, 4)}),
    "mean": (lambda p: ad.mean(p["a"], axis=0), {"a": (3, 4)}),
    "embedding": (lambda p: ad.embedding_lookup(p["a"], np.array([[0, 2], [2, 2]])), {"a": (3, 4)}),
    "gather": (lambda p: ad.gather(p["a"], np.array([3, 0, 3])), {"a": (3, 4)}),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    op, shapes = PRIMITIVES[name]
    weights = np.random.default_rng(7).normal(size=64)

    def build(p):
        y = op(p)
        w = weights[:y.value.size].reshape(y.shape)
        return ad.sum_(ad.mul(y, ad.constant(w)))

    assert grad_check(build, shapes) < 1e-4


def test_log_gradient():
    def build(p):
        return ad.sum_(ad.log(ad.sigmoid(p["a"])))
    assert grad_check(build, {"a": (3, 4)}) < 1e-4


def test_log_floor_clamps_and_zeroes_gradient():
    x = ad.parameter([1e-20, 0.5])
    y = ad.log(x, floor=1e-12)
    assert y.value[0] == pytest.approx(np.log(1e-12))
    ad.backward(ad.sum_(y))
    assert x.grad[0] == 0.0
    assert x.grad[1] == pytest.approx(2.0)


def test_log_nonpositive_without_floor():
    with pytest.raises(NonFiniteError):
        ad.log(ad.constant([0.0, 1.0]))


@pytest.mark.parametrize("reverse", [False, True])
@pytest.mark.parametrize("masked", [False, True])
@pytest.mark.parametrize("with_h0", [False, True])
def test_lstm_gradients(reverse, masked, with_h0):
    B, T, D, H = 2, 4, 3, 2
    mask = np.array([[True, True, True, False], [True, False, True, True]]) if masked else None
    w = np.random.default_rng(11).normal(size=(B, T, H))
    shapes = {"x": (B, T, D), "W": (D, 4 * H), "U": (H, 4 * H), "b": (4 * H,)}
    if with_h0:
        shapes["h0"] = (B, H)

    def build(p):
        hs = ad.lstm(p["x"], p["W"], p["U"], p["b"], h0=p.get("h0"), mask=mask, reverse=reverse)
        return ad.sum_(ad.mul(hs, ad.constant(w)))

    assert grad_check(build, shapes, seed=5, scale=0.7) < 1e-4


def test_lstm_matches_unfused_reference():
    rng = np.random.default_rng(2)
    B, T, D, H = 3, 5, 4, 3
    X, W, U, b = rng.normal(size=(B, T, D)), rng.normal(size=(D, 4 * H)), rng.normal(size=(H, 4 * H)), rng.normal(size=4 * H)
    hs = ad.lstm(ad.constant(X), ad.constant(W), ad.constant(U), ad.constant(b)).value
    h, c = np.zeros((B, H)), np.zeros((B, H))
    sig = lambda z: 1 / (1 + np.exp(-z))
    for t in range(T):
        z = X[:, t] @ W + h @ U + b
        i, f, o, g = sig(z[:, :H]), sig(z[:, H:2 * H]), sig(z[:, 2 * H:3 * H]), np.tanh(z[:, 3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        np.testing.assert_allclose(hs[:, t], h, atol=1e-12)


def test_lstm_mask_carries_state():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(1, 3, 2))
    W, U, b = rng.normal(size=(2, 8)), rng.normal(size=(2, 8)), rng.normal(size=8)
    hs = ad.lstm(*map(ad.constant, (X, W, U, b)), mask=np.array([[True, True, False]])).value
    np.testing.assert_array_equal(hs[0, 2], hs[0, 1])


def test_lstm_shape_errors():
    with pytest.raises(ShapeError):
        ad.lstm(ad.constant(np.ones((2, 3))), ad.constant(np.ones((3, 8))), ad.constant(np.ones((2, 8))),
                ad.constant(np.ones(8)))
    with pytest.raises(ShapeError):
        ad.lstm(ad.constant(np.ones((1, 2, 3))), ad.constant(np.ones((3, 4))), ad.constant(np.ones((2, 8))),
                ad.constant(np.ones(8)))


def test_shared_node_gradient_accumulates():
    x = ad.parameter([2.0])
    y = ad.mul(x, x)
    ad.backward(ad.sum_(ad.add(y, x)))
    assert x.grad[0] == pytest.approx(5.0)


def test_backward_twice_raises():
    x = ad.parameter([1.0, 2.0])
    loss = ad.sum_(ad.mul(x, x))
    ad.backward(loss)
    with pytest.raises(GraphConsumed):
        ad.backward(loss)


def test_backward_needs_scalar():
    with pytest.raises(NotScalar):
        ad.backward(ad.mul(ad.parameter([1.0, 2.0]), ad.constant(2.0)))


def test_non_finite_value_rejected():
    with pytest.raises(NonFiniteError):
        ad.constant([np.nan])


def test_broadcast_growing_both_operands_rejected():
    with pytest.raises(ShapeError):
        ad.add(ad.constant(np.ones((3, 1))), ad.constant(np.ones((1, 4))))


def test_dropout_eval_is_identity():
    x = ad.constant(np.arange(6.0))
    assert ad.dropout(x, 0.5, train=False) is x


def test_dropout_train_is_seeded_and_scaled():
    x = ad.constant(np.ones(1000))
    a = ad.dropout(x, 0.2, train=True, rng=np.random.default_rng(0)).value
    b = ad.dropout(x, 0.2, train=True, rng=np.random.default_rng(0)).value
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1.25}
    with pytest.raises(ValueError):
        ad.dropout(x, 0.2, train=True)


def test_adam_zero_gradient_leaves_params():
    params = {"w": np.array([1.0, -2.0])}
    state = ad.adam_init(params)
    for _ in range(5):
        params, state = ad.adam_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([0.0])}
    new, state = ad.adam_step(params, {"w": np.array([1.0])}, ad.adam_init(params), lr=0.1)
    # m_hat = v_hat = 1 so the step is lr / (1 + eps)
    assert new["w"][0] == pytest.approx(-0.1, abs=1e-8)
    assert state["step"] == 1


def test_adam_symmetric_scalars():
    params = {"a": np.array([0.3]), "b": np.array([0.3])}
    state = ad.adam_init(params)
    for g in (0.5, -1.0, 2.0):
        params, state = ad.adam_step(params, {"a": np.array([g]), "b": np.array([g])}, state)
    assert params["a"][0] == params["b"][0]


def test_adam_rejects_non_finite_gradient():
    params = {"w": np.zeros(2)}
    with pytest.raises(NonFiniteGradient):
        ad.adam_step(params, {"w": np.array([np.inf, 0.0])}, ad.adam_init(params))


def test_checkpoint_roundtrip_is_exact(tmp_path):
    rng = np.random.default_rng(9)
    params = {"W": rng.normal(size=(3, 4)), "b": rng.normal(size=4) * 1e-300}
    ad.save_checkpoint(tmp_path / "ck.json", params, {"note": "x"})
    loaded, meta = ad.load_checkpoint(tmp_path / "ck.json")
    assert meta == {"note": "x"}
    for k in params:
        np.testing.assert_array_equal(loaded[k], params[k])


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        ad.load_checkpoint(tmp_path / "x.json")

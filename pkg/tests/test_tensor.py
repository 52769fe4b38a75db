import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shapeprior import tensor as T
from shapeprior.tensor import AdamState, ContractError, Tensor, adam_step


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_matmul_identity():
    out = T.matmul(np.eye(2), np.array([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_matmul_row_by_column():
    assert T.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).data[0, 0] == 11.0


def test_matmul_mismatch():
    with pytest.raises(ContractError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_vs_naive_random_pairs():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(T.matmul(a, b).data, naive_matmul(a, b), rtol=1e-6)
    for _ in range(100):
        n, k, m = rng.integers(1, 7, size=3)
        a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
        np.testing.assert_allclose(T.matmul(a, b).data, naive_matmul(a, b), rtol=1e-6, atol=1e-12)


def test_activations():
    assert T.activation_forward(np.array(-2.0), "relu") == 0
    assert T.activation_forward(np.array(0.0), "sigmoid") == 0.5
    s = T.activation_forward(np.array(-1000.0), "sigmoid")
    assert np.isfinite(s) and 0 < s <= 1e-300
    s = T.activation_forward(np.array(1000.0), "sigmoid")
    assert np.isfinite(s) and 0 < s < 1


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_forward_outputs_finite(xs):
    x = np.array(xs)
    for kind in ("relu", "sigmoid"):
        assert np.all(np.isfinite(T.activation_forward(x, kind)))
    assert np.all(np.isfinite(T.softplus_array(x)))


def test_backward_linear_case():
    x = np.array([[1.0], [2.0], [3.0]])
    w = Tensor(np.ones((2, 3)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.reduce_sum(w @ x)
    g = T.backward(tape, loss)[id(w)]
    np.testing.assert_array_equal(g, np.outer(np.ones(2), x[:, 0]))


def test_backward_product_rule_at_zero():
    w = Tensor(np.array(0.0), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sigmoid(w) * w
    assert T.backward(tape, loss)[id(w)] == pytest.approx(0.5)


def test_backward_rejects_non_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = w * 2.0
    with pytest.raises(ContractError):
        T.backward(tape, y)


def test_untouched_leaf_gets_zero():
    w = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    with T.Tape() as tape:
        loss = T.reduce_sum(w * w)
    g = T.backward(tape, loss, leaves=[w, unused])
    np.testing.assert_array_equal(g[id(unused)], np.zeros(2))


def test_tape_replays_each_op_once_in_reverse():
    w = Tensor(np.array([0.3, -0.2]), requires_grad=True)
    with T.Tape() as tape:
        loss = T.reduce_sum(T.relu(w * 3.0 + 1.0))
    seen = []
    for node in tape.nodes:
        inner = node.backward

        def wrapped(g, inner=inner, op=node.op):
            seen.append(op)
            return inner(g)

        node.backward = wrapped
    T.backward(tape, loss)
    assert seen == [n.op for n in reversed(tape.nodes)]


def test_no_recording_without_tape():
    w = Tensor(np.ones(2), requires_grad=True)
    y = w * 2.0
    assert y.is_leaf


def _central_diff(f, x, h=1e-4):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(2, 16))
def test_gradients_match_finite_differences_small_mlps(seed, depth, width):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 3))
    y = (rng.uniform(size=(5, 1)) > 0.5).astype(float)
    sizes = [3] + [width] * (depth - 1) + [1]
    params = [rng.normal(scale=0.7, size=(i, o)) for i, o in zip(sizes[:-1], sizes[1:])]
    params += [rng.normal(scale=0.1, size=(1, o)) for o in sizes[1:]]

    def loss_fn(ps, trace=False):
        ts = [Tensor(p, requires_grad=True) for p in ps]
        n = len(ts) // 2
        with T.Tape() as tape:
            h = Tensor(x)
            for k in range(n):
                h = h @ ts[k] + ts[n + k]
                if k < n - 1:
                    h = T.relu(h)
            loss = T.reduce_mean(T.softplus(h) - Tensor(y) * h) + T.reduce_sum(T.sigmoid(h) * T.sigmoid(h))
        return loss, tape, ts

    loss, tape, ts = loss_fn(params)
    grads = T.backward(tape, loss)
    for k, p in enumerate(params):
        def f(v, k=k):
            ps = list(params)
            ps[k] = v
            return float(loss_fn(ps)[0].data)

        num = _central_diff(f, p)
        ana = grads[id(ts[k])]
        err = np.abs(num - ana) / np.maximum(np.maximum(np.abs(num), np.abs(ana)), 1e-6)
        assert err.max() <= 1e-5


def test_adam_zero_gradient_is_identity():
    p = np.array([1.5, -2.0, 0.25], dtype=np.float32)
    new, state = adam_step(p, np.zeros(3), AdamState.fresh(3), 1e-3)
    np.testing.assert_array_equal(new, p)
    assert state.t == 1


def test_adam_single_step_hand_value():
    # m = 0.1, v = 0.001 -> m_hat = v_hat = 1 -> step = lr / (1 + eps)
    new, _ = adam_step(np.zeros(1), np.ones(1), AdamState.fresh(1), 1e-3)
    assert abs(new[0] - (-1e-3 / (1 + 1e-8))) <= 1e-12
    assert abs(new[0] - (-9.9999999e-4)) <= 1e-12


def test_adam_deterministic():
    rng = np.random.default_rng(3)
    p, g = rng.normal(size=10), rng.normal(size=10)
    s = AdamState.fresh(10)
    a = adam_step(p, g, s, 1e-2)
    b = adam_step(p, g, s, 1e-2)
    assert a[0].tobytes() == b[0].tobytes()
    assert a[1].m.tobytes() == b[1].m.tobytes() and a[1].v.tobytes() == b[1].v.tobytes()


def test_adam_rejects_nonfinite_and_bad_shapes():
    with pytest.raises(FloatingPointError):
        adam_step(np.zeros(2), np.array([np.nan, 0.0]), AdamState.fresh(2), 1e-3)
    with pytest.raises(ContractError):
        adam_step(np.zeros(2), np.zeros(3), AdamState.fresh(2), 1e-3)
    with pytest.raises(ContractError):
        adam_step(np.zeros(2), np.zeros(2), AdamState.fresh(2), 0.0)
    with pytest.raises(ContractError):
        AdamState.fresh(2, beta1=1.0)

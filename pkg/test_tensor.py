"""
テンソル演算・逆伝播テープ・Adamのテスト
"""
import numpy as np
import pytest

import tensor as T
from tensor import AdamState, ShapeError, Tape, TapeError, Tensor, adam_step, clip_grad_norm


def numeric_grad(fn, arrays, index, h=1e-5):
    """中心差分による数値勾配"""
    base = [a.copy() for a in arrays]
    grad = np.zeros_like(base[index])
    it = np.nditer(base[index], flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[index][idx] += h
        minus[index][idx] -= h
        grad[idx] = (fn(*[Tensor(a) for a in plus]).item()
                     - fn(*[Tensor(a) for a in minus]).item()) / (2 * h)
    return grad


def check_gradients(fn, arrays, rtol=1e-4, atol=1e-7):
    params = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*params)
    tape.backward(loss)
    for i, p in enumerate(params):
        expected = numeric_grad(fn, arrays, i)
        np.testing.assert_allclose(p.grad, expected, rtol=rtol, atol=atol)


# ============================================
# 順伝播
# ============================================

def test_forward_basics():
    y = T.softmax_rows(Tensor([[0.3, 0.3, 0.3]]))
    np.testing.assert_allclose(y.data, [[1 / 3, 1 / 3, 1 / 3]])
    assert T.tanh(Tensor(0.0)).item() == 0.0
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ Tensor(np.eye(2))).data, a.data)


def test_tensor_shapes():
    assert Tensor(1.0).shape == (1, 1)
    assert Tensor([1.0, 2.0, 3.0]).shape == (1, 3)
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 2, 2)))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_softmax_rows_stable_and_normalized():
    rng = np.random.default_rng(0)
    x = rng.normal(scale=50.0, size=(6, 5))
    x[0, 0] = 1000.0
    y = T.softmax_rows(Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.isfinite(y))
    ly = T.log_softmax_rows(Tensor(x)).data
    np.testing.assert_allclose(np.exp(ly).sum(axis=1), 1.0, atol=1e-12)


def test_row_broadcast_add_and_mul():
    a = Tensor(np.arange(6.0).reshape(3, 2))
    b = Tensor([[10.0, 20.0]])
    np.testing.assert_array_equal(T.add(a, b).data, a.data + b.data)
    np.testing.assert_array_equal(T.add(b, a).data, a.data + b.data)
    np.testing.assert_array_equal(T.mul(a, b).data, a.data * b.data)


def test_take_and_rows():
    a = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    np.testing.assert_array_equal(T.take(a, [2, 0]).data, [[3.0], [4.0]])
    np.testing.assert_array_equal(T.rows(a, 1).data, [[4.0, 5.0, 6.0]])
    np.testing.assert_array_equal(T.rows(a, slice(0, 1)).data, [[1.0, 2.0, 3.0]])


# ============================================
# 逆伝播
# ============================================

def test_sum_gradient_is_ones():
    w = Tensor(np.random.default_rng(1).normal(size=(3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = T.sum(w)
    tape.backward(loss)
    np.testing.assert_array_equal(w.grad, np.ones((3, 4)))


def test_tanh_gradient_at_zero():
    w = Tensor(np.zeros((2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.tanh(w))
    loss.backward()
    np.testing.assert_allclose(w.grad, np.ones((2, 3)))


def test_three_layer_net_matches_finite_differences():
    rng = np.random.default_rng(2)
    arrays = [rng.normal(size=(4, 3)), rng.normal(size=(3, 5)), rng.normal(size=(1, 5)),
              rng.normal(size=(5, 2))]

    def fn(x, w1, b1, w2):
        h = T.tanh(T.add(x @ w1, b1))
        return T.mean(T.log_softmax_rows(h @ w2))

    check_gradients(fn, arrays)


@pytest.mark.parametrize("trial", range(10))
def test_composite_ops_match_finite_differences(trial):
    rng = np.random.default_rng(100 + trial)
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(3, 4))
    row = rng.normal(size=(1, 4))

    def fn(a, b, r):
        z = T.leaky_relu(T.mul(a, r), 0.2)
        z = T.min_elementwise(z, T.clip(b, -0.5, 0.5))
        z = T.concat_cols(z, T.exp(T.mul_scalar(b, 0.3)))
        z = T.add_scalar(T.softmax_rows(z), 0.1)
        z = T.sub(T.log(z), T.mean_rows(z))
        z = T.sum_cols(T.transpose(T.reshape(z, 4, 6)))
        picked = T.take(T.concat_cols(a, b), [0, 5, 7])
        return T.add(T.sum(z), T.sum(T.rows(picked, [0, 2, 2])))

    check_gradients(fn, [x, y, row])


def test_shared_subexpression_accumulates():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(2, 2))

    def fn(w):
        h = T.tanh(w)
        return T.sum(T.mul(h, h) + h)

    check_gradients(fn, [a])


def test_leaf_grads_accumulate_until_zeroed():
    w = Tensor(np.ones((1, 2)), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = T.sum(w)
        tape.backward(loss)
    np.testing.assert_array_equal(w.grad, [[2.0, 2.0]])
    w.zero_grad()
    assert w.grad is None


def test_second_backward_is_rejected():
    w = Tensor(np.ones((1, 2)), requires_grad=True)
    with Tape() as tape:
        loss = T.sum(w)
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)


def test_backward_errors():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        out = T.tanh(w)
    with pytest.raises(ShapeError):
        tape.backward(out)
    with pytest.raises(TapeError):
        T.sum(w).backward()
    with Tape() as other:
        loss = T.sum(w)
    with pytest.raises(TapeError):
        tape.backward(loss)


def test_no_recording_without_grad():
    with Tape() as tape:
        T.tanh(Tensor(np.ones((2, 2))))
    assert tape.nodes == []


# ============================================
# Adam
# ============================================

def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
    state = AdamState.zeros_like([p])
    adam_step([p], [np.zeros((1, 2))], state)
    np.testing.assert_array_equal(p.data, [[1.0, -2.0]])
    adam_step([p], [None], state)
    np.testing.assert_array_equal(p.data, [[1.0, -2.0]])


def test_adam_first_step_closed_form():
    p = Tensor(np.array([[1.0, 1.0, 1.0]]), requires_grad=True)
    g = np.array([[0.5, -2.0, 1e-3]])
    state = AdamState.zeros_like([p])
    adam_step([p], [g], state, lr=0.1, eps=1e-8)
    expected = 1.0 - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)
    assert state.t == 1


def test_adam_is_deterministic():
    def run():
        p = Tensor(np.array([[0.3, -0.7]]), requires_grad=True)
        state = AdamState.zeros_like([p])
        for k in range(5):
            adam_step([p], [np.array([[k * 0.1, -0.2]])], state)
        return p.data

    np.testing.assert_array_equal(run(), run())


def test_adam_shape_mismatch():
    p = Tensor(np.zeros((1, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros((2, 1))], AdamState.zeros_like([p]))


def test_clip_grad_norm():
    grads = [np.array([[3.0]]), None, np.array([[4.0]])]
    clipped, total = clip_grad_norm(grads, 1.0)
    assert total == pytest.approx(5.0)
    assert clipped[1] is None
    assert clipped[0][0, 0] == pytest.approx(0.6)
    unchanged, _ = clip_grad_norm(grads, 10.0)
    assert unchanged[2][0, 0] == 4.0

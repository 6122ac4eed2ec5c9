import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relcredit import tensor as T


def _param(rng, *shape):
    return T.parameter(rng.normal(size=shape))


def test_segment_mean_example():
    x = T.Tensor(np.array([[1.0], [3.0], [5.0]]))
    out = T.segment_mean(x, np.array([0, 0, 1]), 2)
    assert out.data.ravel().tolist() == [2.0, 5.0]


def test_segment_mean_empty_segment_is_zero():
    x = T.Tensor(np.array([[1.0, 2.0]]))
    out = T.segment_mean(x, np.array([1]), 3)
    assert np.array_equal(out.data, [[0, 0], [1, 2], [0, 0]])


def test_segment_softmax_equal_scores():
    out = T.segment_softmax(T.Tensor(np.zeros((3, 1))), np.array([0, 0, 0]), 1)
    assert np.allclose(out.data, 1 / 3)


def test_segment_id_out_of_range():
    with pytest.raises(IndexError):
        T.segment_sum(T.Tensor(np.ones((2, 1))), np.array([0, 2]), 2)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_weighted_bce_closed_form():
    w = 3.0
    logits = T.Tensor(np.zeros((2, 1)))
    loss = T.weighted_bce_with_logits(logits, np.array([1, 0]), w)
    # mean over the pair of w*ln2 and ln2
    assert math.isclose(float(loss.data), (w + 1) / 2 * math.log(2), rel_tol=1e-12)


def test_linear_gradient():
    rng = np.random.default_rng(0)
    W = _param(rng, 3, 2)
    x = rng.normal(size=(4, 3))
    with T.Tape() as tape:
        loss = T.total(T.matmul(T.Tensor(x), W))
    tape.backward(loss)
    assert np.allclose(W.grad, x.sum(axis=0)[:, None] * np.ones((1, 2)))


def test_backward_twice_on_one_tape_errors():
    W = T.parameter(np.ones((2, 2)))
    with T.Tape() as tape:
        loss = T.total(W * W)
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)


def test_leaf_gradients_accumulate_across_tapes():
    W = T.parameter(np.array([[1.0, 2.0]]))
    grads = []
    for _ in range(2):
        with T.Tape() as tape:
            loss = T.total(W * W)
        tape.backward(loss)
        grads.append(W.grad.copy())
    assert np.array_equal(grads[1], 2 * grads[0])


def test_non_scalar_loss_rejected():
    W = T.parameter(np.ones((2, 2)))
    with T.Tape() as tape:
        out = W * W
    with pytest.raises(ValueError):
        tape.backward(out)


def test_grad_check_quadratic():
    W = T.parameter(np.array([[0.3, -1.2], [2.0, 0.5]]))
    rep = T.grad_check(lambda: T.total(W * W), [W], eps=1e-4)
    assert rep["max_error"] < 1e-8


def _composite(rng, n=5, d=7):
    x = rng.normal(size=(n, d))
    W1 = T.parameter(rng.normal(size=(d, 4)), "W1")
    W2 = T.parameter(rng.normal(size=(4, 3)), "W2")
    g = T.parameter(rng.uniform(0.5, 1.5, 3), "gamma")
    b = T.parameter(rng.normal(size=3), "beta")
    seg = np.array([0, 0, 1, 2, 2])
    bn = T.BatchNormState(3)

    def f():
        h = T.elu(T.matmul(T.Tensor(x), W1))
        h = T.leaky_relu(T.matmul(h, W2), 0.2)
        h = T.batchnorm(h, g, b, bn, training=True)
        att = T.segment_softmax(h, seg, 3)
        agg = T.segment_sum(att * h, seg, 3)
        m = T.segment_mean(T.sigmoid(h), seg, 3)
        z = T.l2_normalize_rows(T.concat_cols([agg, m]) + T.Tensor(np.full((3, 6), 0.1)))
        s = T.logsumexp_rows(z) + T.sum_axis(T.exp(z), axis=1)
        return T.mean(T.log(T.sigmoid(s)))
    return f, [W1, W2, g, b]


def test_composite_grad_check():
    f, params = _composite(np.random.default_rng(3))
    rep = T.grad_check(f, params, eps=1e-5)
    assert rep["max_error"] < 1e-4, rep


def test_relu_grad_check_off_kink():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(5, 7))
    W = T.parameter(rng.normal(size=(7, 3)))
    assert np.abs(x @ W.data).min() > 1e-3     # no pre-activation sits on the kink
    rep = T.grad_check(lambda: T.total(T.relu(T.matmul(T.Tensor(x), W))), [W])
    assert rep["max_error"] < 1e-6


def test_batchnorm_eval_uses_running_stats():
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.normal(2.0, 3.0, size=(64, 4)))
    st_ = T.BatchNormState(4)
    g, b = T.parameter(np.ones(4)), T.parameter(np.zeros(4))
    for _ in range(200):
        T.batchnorm(x, g, b, st_, training=True)
    ev = T.batchnorm(x, g, b, st_, training=False)
    assert np.allclose(st_.running_mean, x.data.mean(axis=0), atol=1e-8)
    # eval output uses the frozen (unbiased) variance, train uses the batch variance
    tr = T.batchnorm(x, g, b, T.BatchNormState(4), training=True)
    n = x.shape[0]
    assert np.allclose(ev.data, tr.data * np.sqrt((n - 1) / n), atol=1e-3)


def test_dropout_mask_replayable():
    x = T.Tensor(np.ones((3, 4)))
    mask = np.array([[1, 0, 1, 1]] * 3, dtype=bool)
    a = T.dropout(x, mask, 0.25)
    b = T.dropout(x, mask, 0.25)
    assert np.array_equal(a.data, b.data)
    assert np.allclose(a.data[:, 1], 0)
    assert np.allclose(a.data[:, 0], 1 / 0.75)


def test_adam_first_step_magnitude():
    W = T.parameter(np.array([1.0, -1.0]))
    W.grad = np.array([0.5, -2.0])
    opt = T.Adam([W], lr=0.1)
    opt.step()
    # bias-corrected first step moves each entry by lr * sign(grad)
    assert np.allclose(W.data, [0.9, -0.9], atol=1e-7)


def test_checkpoint_roundtrip(tmp_path):
    named = {"b": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.array([1.5], dtype=np.float32)}
    T.save_checkpoint(str(tmp_path / "ck"), named, {"note": 1})
    back, extra = T.load_checkpoint(str(tmp_path / "ck"))
    assert extra == {"note": 1}
    for k in named:
        assert np.array_equal(back[k], named[k])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=30), st.integers(1, 3))
def test_segment_softmax_sums_to_one(seg, cols):
    seg = np.array(seg)
    x = np.random.default_rng(len(seg)).normal(size=(seg.size, cols)) * 10
    y = T.segment_softmax(T.Tensor(x), seg, 5).data
    sums = np.zeros((5, cols))
    np.add.at(sums, seg, y)
    present = np.bincount(seg, minlength=5) > 0
    assert np.allclose(sums[present], 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_l2_normalize_rows_unit(n, d, seed):
    x = np.random.default_rng(seed).normal(size=(n, d)) + 1e-3
    y = T.l2_normalize_rows(T.Tensor(x)).data
    assert np.allclose(np.linalg.norm(y, axis=1), 1.0)


def test_l2_normalize_zero_row_errors():
    with pytest.raises(ValueError):
        T.l2_normalize_rows(T.Tensor(np.zeros((1, 3))))

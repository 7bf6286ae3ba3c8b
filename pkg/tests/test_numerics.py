import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hhtrack.numerics import (
    AdamWState,
    NonFiniteError,
    Tape,
    Tensor,
    adamw_step,
    backward,
    concat,
    conv2d,
    depthwise_conv2d,
    elementwise_max,
    finite_diff_check,
    gelu,
    layer_norm,
    matmul,
    precision,
    softmax_rows,
)

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def test_matmul_examples():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), a).data, a.data)
    np.testing.assert_array_equal(matmul(a, Tensor([[5.0], [6.0]])).data, [[17.0], [39.0]])
    z = matmul(Tensor(np.zeros((3, 2))), a)
    np.testing.assert_array_equal(z.data, np.zeros((3, 2)))


def test_matmul_shape_mismatch_reports_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows(Tensor([[4.0, 4.0, 4.0]])).data, [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_array_equal(softmax_rows(Tensor([[7.5]])).data, [[1.0]])
    np.testing.assert_allclose(softmax_rows(Tensor([[0.0, math.log(2)]])).data, [[1 / 3, 2 / 3]], atol=1e-15)


def test_softmax_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        softmax_rows(Tensor([[0.0, np.inf]]))


@given(arrays(np.float64, (3, 5), elements=finite), finite)
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    p = softmax_rows(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax_rows(Tensor(x + c)).data, p, atol=1e-12)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_array_equal(layer_norm(Tensor([1.0, 1.0, 1.0]), one, zero).data, [0, 0, 0])
    out = layer_norm(Tensor([1.0, 2.0, 3.0]), one, zero, eps=1e-14).data
    s = math.sqrt(2 / 3)
    np.testing.assert_allclose(out, [-1 / s, 0.0, 1 / s], atol=1e-6)
    np.testing.assert_allclose(out, [-1.2247, 0, 1.2247], atol=1e-4)
    beta = Tensor([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(layer_norm(Tensor([3.0, -7.0, 0.1]), zero, beta).data, beta.data)


@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_layer_norm_moments(x):
    x = x + np.arange(6)  # keep variance well above eps
    out = layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-10
    var = x.var(axis=-1)
    np.testing.assert_allclose(out.var(axis=-1), var / (var + 1e-5), atol=1e-12)
    big = var > 1.0
    assert np.all(np.abs(out.var(axis=-1)[big] - 1.0) < 1e-5)


def test_gelu_examples():
    assert gelu(Tensor(0.0)).item() == 0.0
    phi1 = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
    assert abs(gelu(Tensor(1.0)).item() - phi1) < 1e-15
    assert abs(gelu(Tensor(1.0)).item() - 0.841345) < 1e-6
    assert abs(gelu(Tensor(10.0)).item() - 10.0) < 1e-9


def test_elementwise_max_examples():
    a = Tensor([1.0, -2.0])
    np.testing.assert_array_equal(elementwise_max(a, a).data, a.data)
    np.testing.assert_array_equal(elementwise_max(a, Tensor([0.0, 5.0])).data, [1.0, 5.0])
    with pytest.raises(ValueError):
        elementwise_max(Tensor(np.ones(2)), Tensor(np.ones(3)))


@given(arrays(np.float64, 7, elements=finite), arrays(np.float64, 7, elements=finite))
def test_elementwise_max_properties(a, b):
    m = elementwise_max(Tensor(a), Tensor(b)).data
    np.testing.assert_array_equal(m, elementwise_max(Tensor(b), Tensor(a)).data)
    assert np.all(m >= a) and np.all(m >= b)
    np.testing.assert_allclose(m, a + b - np.minimum(a, b), atol=1e-12)


def test_elementwise_max_tie_splits_gradient():
    a, b = Tensor([2.0], requires_grad=True), Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        loss = elementwise_max(a, b).sum()
    tape.backward(loss)
    assert a.grad[0] == 0.5 and b.grad[0] == 0.5


def test_backward_examples():
    x = Tensor([1.5, -2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    grads = backward(loss, tape)
    np.testing.assert_array_equal(grads[id(x)], 2 * x.data)

    y = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = (c * c).sum()
        _ = y * 2.0
    tape.backward(loss)
    np.testing.assert_array_equal(y.grad, [0.0, 0.0])

    z = Tensor([-1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = elementwise_max(z, Tensor([0.0, 0.0])).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(z.grad, [0.0, 1.0])


def test_backward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 3.0
        loss = y.sum()
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)
    with pytest.raises(RuntimeError, match="detached"):
        tape.backward(Tensor(1.0))
    tape.backward(loss)
    with pytest.raises(RuntimeError, match="zero_grad"):
        tape.backward(loss)
    tape.zero_grad()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_gradients_accumulate_across_tapes():
    x = Tensor([0.5, -1.0], requires_grad=True)
    with Tape() as t1:
        l1 = (x * x).sum()
    with Tape() as t2:
        l2 = (x * 3.0).sum()
    t1.backward(l1)
    t2.backward(l2)
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_no_recording_outside_tape():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad


def test_tensor_is_immutable_and_finite():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_precision_is_scoped():
    assert Tensor(1.0).data.dtype == np.float64
    with precision(np.float32):
        assert (Tensor([1.0]) * 2.0).data.dtype == np.float32
    assert Tensor(1.0).data.dtype == np.float64


def test_finite_diff_examples():
    rng = np.random.default_rng(3)
    rep = finite_diff_check(lambda x: (x * x).sum(), Tensor(rng.normal(size=3)), h=1e-5)
    assert rep.passed and rep.max_rel_err < 1e-7
    rep = finite_diff_check(lambda x: (x * 0.0).sum() + 4.0, Tensor(rng.normal(size=3)))
    assert rep.passed and rep.max_rel_err == 0.0
    w = Tensor(rng.normal(size=(2, 2)))
    rep = finite_diff_check(lambda x: (softmax_rows(x) * w).sum(), Tensor(rng.normal(size=(2, 2))), tol=1e-5)
    assert rep.passed


def test_finite_diff_detects_wrong_gradient():
    # gradient of x*x reported against a function whose value is x*x + x: mismatch
    def f(x):
        return (x * x).sum() + Tensor(x.data.sum())
    rep = finite_diff_check(f, Tensor([0.3, 0.7]))
    assert not rep.passed


@pytest.mark.parametrize("seed", range(3))
def test_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, 4, 5, 3)))
    dw = Tensor(rng.normal(size=(3, 3, 3)))
    db = Tensor(rng.normal(size=3))
    proj = Tensor(rng.normal(size=(1, 4, 5, 3)))
    rep = finite_diff_check(lambda a, w, b: (depthwise_conv2d(a, w, b) * proj).sum(), [x, dw, db])
    assert rep.passed, rep.max_rel_err
    cw = Tensor(rng.normal(size=(3, 3, 3, 2)))
    cb = Tensor(rng.normal(size=2))
    proj2 = Tensor(rng.normal(size=(1, 4, 5, 2)))
    rep = finite_diff_check(lambda a, w, b: (conv2d(a, w, b) * proj2).sum(), [x, cw, cb])
    assert rep.passed, rep.max_rel_err


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    ref = np.zeros((3, 4, 3))
    for i in range(3):
        for j in range(4):
            for co in range(3):
                acc = b[co]
                for di in range(3):
                    for dj in range(3):
                        ii, jj = i + di - 1, j + dj - 1
                        if 0 <= ii < 3 and 0 <= jj < 4:
                            acc += sum(x[ii, jj, ci] * w[di, dj, ci, co] for ci in range(2))
                ref[i, j, co] = acc
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_concat_and_getitem_gradients():
    rng = np.random.default_rng(1)
    a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(1, 3)))
    w = Tensor(rng.normal(size=(3, 2)))
    rep = finite_diff_check(lambda p, q: (concat([p, q], axis=0)[..., 1:] * w).sum(), [a, b])
    assert rep.passed


class TestAdamW:
    def test_zero_grad_no_decay(self):
        p = Tensor([1.0, -2.0])
        st_ = AdamWState.zeros_like(p, lr=0.1, weight_decay=0.0)
        q, st2 = adamw_step(p, np.zeros(2), st_)
        np.testing.assert_array_equal(q.data, p.data)
        assert st2.t == st_.t + 1

    def test_decoupled_decay(self):
        p = Tensor([1.0, -2.0])
        st_ = AdamWState.zeros_like(p, lr=0.1, weight_decay=0.01)
        q, _ = adamw_step(p, np.zeros(2), st_)
        np.testing.assert_allclose(q.data, p.data * (1 - 0.1 * 0.01), atol=1e-15)

    def test_first_step_closed_form(self):
        p = Tensor([0.7])
        st_ = AdamWState.zeros_like(p, lr=0.01, weight_decay=0.0)
        g = np.array([-0.3])
        q, st2 = adamw_step(p, g, st_)
        np.testing.assert_allclose(q.data, 0.7 - 0.01 * g / (abs(g) + 1e-8), atol=1e-15)
        assert np.all(st2.v >= 0)

    def test_shape_mismatch(self):
        p = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            adamw_step(p, np.zeros(3), AdamWState.zeros_like(p))

    @settings(max_examples=25)
    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=5))
    def test_steps_increment_counter(self, grads):
        p = Tensor([0.2])
        st_ = AdamWState.zeros_like(p)
        for k, g in enumerate(grads, start=1):
            p, st_ = adamw_step(p, np.array([g]), st_)
            assert st_.t == k
            assert np.all(st_.v >= 0)

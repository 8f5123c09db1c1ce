import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import dynsplat.tensor as T
from dynsplat.tensor import (
    ShapeError,
    Tape,
    Tensor,
    attention,
    backward,
    concat,
    elementwise,
    finite_difference_check,
    layer_norm,
    matmul,
    no_grad,
    softmax,
    take,
    transposed_conv_2x,
)


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


# -- elementwise ---------------------------------------------------------------


def test_sigmoid_at_zero():
    assert elementwise("sigmoid", t64(0.0)).item() == pytest.approx(0.5)


def test_scale_activation_value():
    # min(exp(s' - 2.3), 0.5) at s' = 2.3 saturates at the cap
    s = t64(2.3)
    out = T.minimum_const(T.exp(s - 2.3), 0.5)
    assert out.item() == pytest.approx(0.5)


def test_add_values_and_backward():
    a = t64([1.0, 2.0], requires_grad=True)
    b = t64([3.0, 4.0], requires_grad=True)
    out = a + b
    np.testing.assert_allclose(out.numpy(), [4.0, 6.0])
    backward(out, np.array([1.0, 1.0]))
    np.testing.assert_allclose(a.grad, [1.0, 1.0])
    np.testing.assert_allclose(b.grad, [1.0, 1.0])


def test_broadcast_shape_mismatch_message():
    with pytest.raises(ShapeError) as exc:
        T.add(t64(np.zeros((2, 3))), t64(np.zeros((4,))))
    assert "(2, 3)" in str(exc.value) and "(4,)" in str(exc.value)


def test_div_by_zero_flagged_by_validity_check():
    with np.errstate(divide="ignore"):
        out = T.div(t64([1.0]), t64([0.0]))
    assert not out.is_finite()
    assert T.all_finite(t64([1.0]), t64([2.0]))


def test_unknown_elementwise_op():
    with pytest.raises(ValueError):
        elementwise("frobnicate", t64(1.0))


@given(
    arrays(np.float64, (3, 4), elements=st.floats(-5, 5)),
    arrays(np.float64, (4,), elements=st.floats(-5, 5)),
)
def test_broadcast_add_gradients_sum_over_stretched_axis(a, b):
    ta, tb = t64(a, True), t64(b, True)
    out = (ta + tb).sum()
    backward(out)
    np.testing.assert_allclose(ta.grad, np.ones((3, 4)))
    np.testing.assert_allclose(tb.grad, np.full(4, 3.0))


# -- matmul ---------------------------------------------------------------------


def test_matmul_identity():
    eye = t64(np.eye(2))
    np.testing.assert_allclose(matmul(eye, eye).numpy(), np.eye(2))


def test_matmul_hand_contraction():
    out = matmul(t64([[1.0, 2.0], [3.0, 4.0]]), t64([[1.0], [1.0]]))
    np.testing.assert_allclose(out.numpy(), [[3.0], [7.0]])


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        matmul(t64(np.zeros((4, 5))), t64(np.zeros((4, 3))))


def test_matmul_gradcheck(rng):
    a = t64(rng.standard_normal((4, 5)))
    b = t64(rng.standard_normal((5, 3)))
    err = finite_difference_check(lambda x, y: matmul(x, y).sum(), [a, b], h=1e-5)
    assert err < 1e-4


def test_batched_matmul_gradcheck(rng):
    a = t64(rng.standard_normal((2, 3, 4)))
    b = t64(rng.standard_normal((2, 4, 2)))
    err = finite_difference_check(lambda x, y: (matmul(x, y) ** 2).sum(), [a, b], h=1e-5)
    assert err < 1e-4


# -- softmax ----------------------------------------------------------------------


def test_softmax_symmetry():
    out = softmax(t64([0.0, 0.0]), temperature=0.5)
    np.testing.assert_allclose(out.numpy(), [0.5, 0.5])


def test_softmax_temperature_value():
    out = softmax(t64([1.0, 0.0]), temperature=0.5).numpy()
    e2 = math.exp(2.0)
    np.testing.assert_allclose(out, [e2 / (e2 + 1), 1 / (e2 + 1)], atol=1e-12)
    assert out[0] == pytest.approx(0.8808, abs=1e-4)
    assert out[1] == pytest.approx(0.1192, abs=1e-4)


def test_softmax_large_logits_stable():
    out = softmax(t64([1000.0, 0.0]), temperature=1.0)
    assert out.is_finite()
    np.testing.assert_allclose(out.numpy(), [1.0, 0.0], atol=1e-12)


def test_softmax_rejects_nonpositive_temperature():
    with pytest.raises(ValueError):
        softmax(t64([1.0, 2.0]), temperature=0.0)


@given(arrays(np.float64, (5,), elements=st.floats(-30, 30)), st.floats(0.1, 3.0))
def test_softmax_sums_to_one_and_shift_invariant(logits, tau):
    out = softmax(t64(logits), temperature=tau).numpy()
    assert abs(out.sum() - 1.0) < 1e-6
    assert (out >= 0).all()
    shifted = softmax(t64(logits + 17.0), temperature=tau).numpy()
    np.testing.assert_allclose(out, shifted, atol=1e-9)


def test_softmax_gradcheck(rng):
    x = t64(rng.standard_normal(6))
    err = finite_difference_check(lambda v: (softmax(v, temperature=0.5) ** 2).sum(), [x], h=1e-6)
    assert err < 1e-4


# -- layer norm --------------------------------------------------------------------


def test_layer_norm_constant_row():
    out = layer_norm(t64([3.0, 3.0, 3.0]), eps=1e-5)
    np.testing.assert_allclose(out.numpy(), [0.0, 0.0, 0.0], atol=1e-9)


def test_layer_norm_two_point():
    out = layer_norm(t64([1.0, -1.0]), eps=1e-12)
    np.testing.assert_allclose(out.numpy(), [1.0, -1.0], atol=1e-5)


def test_layer_norm_gradcheck(rng):
    x = t64(rng.standard_normal((3, 5)))
    w = t64(rng.standard_normal(5))
    b = t64(rng.standard_normal(5))
    err = finite_difference_check(lambda xx, ww, bb: (layer_norm(xx, ww, bb) ** 2).sum(), [x, w, b], h=1e-6)
    assert err < 1e-4


# -- attention ----------------------------------------------------------------------


def test_attention_single_token_returns_values(rng):
    q = t64(rng.standard_normal((1, 8)))
    k = t64(rng.standard_normal((1, 8)))
    v = t64(rng.standard_normal((1, 8)))
    out = attention(q, k, v, heads=2)
    np.testing.assert_allclose(out.numpy(), v.numpy(), atol=1e-12)


def test_attention_identical_keys_average_values(rng):
    q = t64(rng.standard_normal((3, 4)))
    k = t64(np.tile(rng.standard_normal((1, 4)), (3, 1)))
    v = t64(rng.standard_normal((3, 4)))
    out = attention(q, k, v, heads=1)
    expected = np.tile(v.numpy().mean(axis=0, keepdims=True), (3, 1))
    np.testing.assert_allclose(out.numpy(), expected, atol=1e-12)


def test_attention_head_divisibility():
    z = t64(np.zeros((2, 6)))
    with pytest.raises(ShapeError):
        attention(z, z, z, heads=4)


def test_attention_gradcheck(rng):
    q = t64(rng.standard_normal((2, 4)))
    k = t64(rng.standard_normal((2, 4)))
    v = t64(rng.standard_normal((2, 4)))
    err = finite_difference_check(lambda a, b, c: (attention(a, b, c, heads=1) ** 2).sum(), [q, k, v], h=1e-6)
    assert err < 1e-4


# -- transposed conv ------------------------------------------------------------------


def test_transposed_conv_ones_kernel():
    x = t64(np.full((1, 1, 1), 3.0))
    kern = t64(np.ones((1, 2, 2, 1)))
    out = transposed_conv_2x(x, kern)
    np.testing.assert_allclose(out.numpy(), np.full((2, 2, 1), 3.0))


def test_transposed_conv_three_stages_reach_full_resolution(rng):
    x = t64(rng.standard_normal((4, 6, 3)))
    for _ in range(3):
        kern = t64(rng.standard_normal((x.shape[2], 2, 2, 2)))
        x = transposed_conv_2x(x, kern)
    assert x.shape == (32, 48, 2)


def test_transposed_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        transposed_conv_2x(t64(np.zeros((2, 2, 3))), t64(np.zeros((4, 2, 2, 1))))


def test_transposed_conv_gradcheck(rng):
    x = t64(rng.standard_normal((2, 2, 2)))
    kern = t64(rng.standard_normal((2, 2, 2, 3)))
    bias = t64(rng.standard_normal(3))
    err = finite_difference_check(
        lambda a, b, c: (transposed_conv_2x(a, b, c) ** 2).sum(), [x, kern, bias], h=1e-6
    )
    assert err < 1e-4


# -- backward machinery ---------------------------------------------------------------


def test_backward_square():
    x = t64(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_requires_scalar():
    x = t64([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * x)


def test_backward_sigmoid_chain_matches_fd(rng):
    w = t64(rng.standard_normal((3, 4)))
    x = t64(rng.standard_normal((4, 1)))
    err = finite_difference_check(lambda ww, xx: T.sigmoid(matmul(ww, xx)).sum(), [w, x], h=1e-6)
    assert err < 1e-4


def test_detached_subgraph_gets_zero_gradient():
    x = t64(2.0, requires_grad=True)
    y = (x * x).detach()
    loss = y * x
    backward(loss)
    assert x.grad == pytest.approx(4.0)  # only the direct factor contributes


def test_backward_accumulates_without_reset():
    x = t64(3.0, requires_grad=True)
    backward(x * x)
    backward(x * x)
    assert x.grad == pytest.approx(12.0)


def test_backward_of_sum_equals_sum_of_backwards(rng):
    data = rng.standard_normal(5)
    x1 = t64(data, requires_grad=True)
    l1 = (x1 * x1).sum()
    l2 = T.exp(x1).sum()
    backward(T.add(l1, l2))
    combined = x1.grad.copy()

    x2 = t64(data, requires_grad=True)
    backward((x2 * x2).sum())
    backward(T.exp(x2).sum())
    np.testing.assert_allclose(combined, x2.grad, atol=1e-12)


def test_tape_visits_each_node_once_after_consumers():
    x = t64(1.5, requires_grad=True)
    y = x * x
    z = T.add(y * y, T.exp(y))  # diamond fan-out on y
    backward(z)
    tape = Tape.from_root(z)
    assert all(rec.calls == 1 for rec in tape.records)
    seqs = [rec.seq for rec in tape.records]
    assert seqs == sorted(seqs)
    # d/dx (x^4 + exp(x^2)) = 4x^3 + 2x exp(x^2)
    expected = 4 * 1.5**3 + 2 * 1.5 * math.exp(1.5**2)
    assert x.grad == pytest.approx(expected, rel=1e-12)


def test_no_grad_blocks_recording():
    x = t64(2.0, requires_grad=True)
    with no_grad():
        y = x * x
    assert not y.requires_grad and y.node_id is None


def test_forward_is_deterministic(rng):
    a = rng.standard_normal((16, 16))
    b = rng.standard_normal((16, 16))
    r1 = matmul(t64(a), t64(b)).numpy()
    r2 = matmul(t64(a), t64(b)).numpy()
    assert (r1 == r2).all()


# -- shape ops ------------------------------------------------------------------------


def test_concat_and_take_gradients(rng):
    a = t64(rng.standard_normal((2, 3)), requires_grad=True)
    b = t64(rng.standard_normal((4, 3)), requires_grad=True)
    joined = concat([a, b], axis=0)
    picked = take(joined, np.array([0, 0, 5]), axis=0)
    backward(picked.sum())
    np.testing.assert_allclose(a.grad, [[2, 2, 2], [0, 0, 0]])
    np.testing.assert_allclose(b.grad, [[0, 0, 0], [0, 0, 0], [0, 0, 0], [1, 1, 1]])


def test_getitem_slice_gradient(rng):
    a = t64(rng.standard_normal((4, 4)), requires_grad=True)
    backward(a[1:3, ::2].sum())
    expected = np.zeros((4, 4))
    expected[1:3, ::2] = 1.0
    np.testing.assert_allclose(a.grad, expected)


def test_stack_matches_numpy(rng):
    parts = [t64(rng.standard_normal(3)) for _ in range(4)]
    out = T.stack(parts, axis=0)
    np.testing.assert_allclose(out.numpy(), np.stack([p.numpy() for p in parts]))


# -- finite difference oracle -----------------------------------------------------------


def test_fd_check_exact_for_linear(rng):
    x = t64(rng.standard_normal(7))
    assert finite_difference_check(lambda v: v.sum(), [x], h=1e-4) < 1e-10


def test_fd_check_quadratic_tight(rng):
    x = t64(rng.standard_normal(6))
    err = finite_difference_check(lambda v: (v * v).sum(), [x], h=1e-4)
    assert err < 1e-6


def test_fd_check_kink_exclusion():
    # at the min-with-constant kink the two-sided difference disagrees with
    # either one-sided derivative; the mask documents and excludes it
    x = t64([0.5, 2.0])
    f = lambda v: T.minimum_const(v, 0.5).sum()
    masked = finite_difference_check(f, [x], h=1e-4, kink_mask=[np.array([True, False])])
    assert masked < 1e-8
    unmasked = finite_difference_check(f, [x], h=1e-4)
    assert unmasked > 0.1  # the kink coordinate is genuinely wrong unmasked


# -- primitive sweep: analytic vs central differences ------------------------------------


@pytest.mark.parametrize(
    "name,fn,low,high",
    [
        ("exp", T.exp, -2, 2),
        ("log", T.log, 0.2, 3),
        ("sqrt", T.sqrt, 0.2, 3),
        ("sigmoid", T.sigmoid, -4, 4),
        ("tanh", T.tanh, -4, 4),
        ("gelu", T.gelu, -4, 4),
        ("sin", T.sin, -3, 3),
        ("cos", T.cos, -3, 3),
        ("abs", T.absolute, 0.3, 3),
        ("neg", T.neg, -3, 3),
    ],
)
def test_unary_primitives_match_central_differences(name, fn, low, high, rng):
    x = t64(rng.uniform(low, high, size=12))
    err = finite_difference_check(lambda v: (fn(v) * fn(v)).sum(), [x], h=1e-6)
    assert err < 1e-4, f"{name}: {err}"


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_primitives_match_central_differences(op, rng):
    a = t64(rng.uniform(0.5, 2.0, size=(3, 4)))
    b = t64(rng.uniform(0.5, 2.0, size=(4,)))
    err = finite_difference_check(lambda x, y: (elementwise(op, x, y) ** 2).sum(), [a, b], h=1e-6)
    assert err < 1e-4

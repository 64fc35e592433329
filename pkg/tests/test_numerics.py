"""Primitive operations against brute-force oracles and finite differences."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alphanet.errors import DegenerateAlphaError, NumericError, ShapeError
from alphanet.numerics import (
    GradTape,
    Node,
    abs_normalize,
    affine,
    cap_floor_clamp,
    finite_diff_check,
    leaky_relu,
    sgd_momentum_step,
    softmax_xent,
)


def test_affine_identity():
    out = affine(np.eye(2), np.array([3.0, 4.0]), np.zeros(2))
    assert np.array_equal(out, [3.0, 4.0])


def test_affine_single_row():
    out = affine(np.array([[1.0, 2.0]]), np.array([3.0, 4.0]), np.array([5.0]))
    assert out.shape == (1,)
    assert out[0] == 16.0


def test_affine_matches_triple_loop_oracle():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(8, 8))
    v = rng.normal(size=8)
    b = rng.normal(size=8)
    expected = np.zeros(8)
    for r in range(8):
        acc = 0.0
        for c in range(8):
            acc += m[r, c] * v[c]
        expected[r] = acc + b[r]
    assert np.max(np.abs(affine(m, v, b) - expected)) < 1e-12


def test_affine_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        affine(np.zeros((2, 3)), np.zeros(4), np.zeros(2))
    assert "(2, 3)" in str(exc.value) and "(4,)" in str(exc.value)
    with pytest.raises(ShapeError):
        affine(np.zeros((2, 3)), np.zeros(3), np.zeros(5))


@given(
    a=st.floats(-5, 5),
    b=st.floats(-5, 5),
    seed=st.integers(0, 2**31),
)
def test_affine_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(5, 4))
    u = rng.normal(size=4)
    v = rng.normal(size=4)
    zero = np.zeros(5)
    lhs = affine(m, a * u + b * v, zero)
    rhs = a * affine(m, u, zero) + b * affine(m, v, zero)
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_leaky_relu_examples():
    assert np.array_equal(leaky_relu(np.array([1.0, -1.0]), 0.0), [1.0, 0.0])
    out = leaky_relu(np.array([2.0, -4.0]), 0.1)
    assert out[0] == 2.0
    assert out[1] == pytest.approx(-0.4)
    nonneg = np.array([0.0, 0.5, 3.0])
    assert np.array_equal(leaky_relu(nonneg, 0.3), nonneg)


def test_leaky_relu_rejects_bad_slope():
    with pytest.raises(ValueError):
        leaky_relu(np.zeros(2), 1.0)
    with pytest.raises(ValueError):
        leaky_relu(np.zeros(2), -0.1)


def test_softmax_xent_symmetric_pair():
    loss, grad = softmax_xent(np.array([0.0, 0.0]), 0)
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    assert grad == pytest.approx([-0.5, 0.5], abs=1e-15)


def test_softmax_xent_dominant_score():
    loss, _ = softmax_xent(np.array([10.0, 0.0, 0.0]), 0)
    # direct evaluation of -log(e^10 / (e^10 + 2))
    assert loss == pytest.approx(math.log(1.0 + 2.0 * math.exp(-10.0)), rel=1e-12)
    assert loss == pytest.approx(9.08e-5, rel=1e-2)


def test_softmax_xent_label_out_of_range():
    with pytest.raises(IndexError):
        softmax_xent(np.array([1.0, 2.0]), 2)
    with pytest.raises(IndexError):
        softmax_xent(np.array([1.0, 2.0]), -1)


@given(seed=st.integers(0, 2**31), n=st.integers(2, 12))
def test_softmax_xent_loss_nonnegative_grad_sums_to_zero(seed, n):
    rng = np.random.default_rng(seed)
    scores = rng.normal(scale=5.0, size=n)
    label = int(rng.integers(n))
    loss, grad = softmax_xent(scores, label)
    assert loss >= 0.0
    assert abs(grad.sum()) < 1e-12


def test_sgd_plain_step():
    params, _ = sgd_momentum_step(
        np.array([1.0]), np.array([2.0]), np.zeros(1), lr=0.1, momentum=0.0
    )
    assert params == pytest.approx([0.8])


def test_sgd_zero_grads_zero_velocity_is_noop():
    params = np.array([1.0, -2.0])
    before = params.copy()
    sgd_momentum_step(params, np.zeros(2), np.zeros(2), lr=0.5, momentum=0.9)
    assert np.array_equal(params, before)


def test_sgd_two_steps_match_hand_unrolled_recurrence():
    lr, mu = 0.1, 0.9
    g1 = np.array([1.0, -3.0])
    g2 = np.array([0.5, 2.0])
    p = np.array([1.0, 1.0])
    v = np.zeros(2)
    sgd_momentum_step(p, g1, v, lr, mu)
    sgd_momentum_step(p, g2, v, lr, mu)
    # unrolled: v1 = g1; p1 = p0 - lr g1; v2 = mu g1 + g2; p2 = p1 - lr v2
    expected = np.array([1.0, 1.0]) - lr * g1 - lr * (mu * g1 + g2)
    assert np.max(np.abs(p - expected)) < 1e-15
    assert np.max(np.abs(v - (mu * g1 + g2))) < 1e-15


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_momentum_step(np.zeros(2), np.zeros(3), np.zeros(2), 0.1, 0.9)
    with pytest.raises(ShapeError):
        sgd_momentum_step(np.zeros(2), np.zeros(2), np.zeros(3), 0.1, 0.9)


def test_finite_diff_check_quadratic():
    err = finite_diff_check(lambda x: float(x[0] ** 2), np.array([3.0]), np.array([6.0]))
    assert err < 1e-8


def test_finite_diff_check_detects_corruption():
    err = finite_diff_check(
        lambda x: float(x[0] ** 2), np.array([3.0]), np.array([6.1])
    )
    assert err > 1e-2


def test_finite_diff_check_nonfinite_objective():
    with pytest.raises(NumericError):
        finite_diff_check(lambda x: float("inf"), np.array([1.0]), np.array([0.0]))


def test_abs_normalize_basic():
    out = abs_normalize(np.array([-1.0, 1.0, 2.0]))
    assert np.array_equal(out, [-0.25, 0.25, 0.5])


def test_abs_normalize_degenerate_strict_vs_lenient():
    zeros = np.zeros(3)
    with pytest.raises(DegenerateAlphaError):
        abs_normalize(zeros, strict=True)
    assert np.array_equal(abs_normalize(zeros, strict=False), zeros)


def test_cap_floor_clamp_zero_pushed_to_plus_floor():
    out = cap_floor_clamp(np.array([0.9, 0.0, -0.1]), cap=0.6, floor=0.2)
    assert out[0] == pytest.approx(0.6)
    assert out[1] == pytest.approx(0.2)   # sign'(0) = +1
    assert out[2] == pytest.approx(-0.2)  # sign preserved


# ---------------------------------------------------------------------------
# Tape primitives vs central differences
#
# backward() seeds every coordinate of the root with 1, so the analytic
# gradient it accumulates is d(sum of outputs)/d(input) — which is exactly
# what the harness gets when the probed scalar is the output sum.


def _tape_grad(build, x):
    """Gradient of sum(build(tape, Node(x))) with respect to x."""
    tape = GradTape()
    node = Node(x)
    out = build(tape, node)
    tape.backward(out)
    return node.grad.ravel()


def _check_primitive(build, forward, x, tol=1e-5):
    grad = _tape_grad(build, x)
    err = finite_diff_check(
        lambda flat: float(np.sum(forward(flat.reshape(x.shape)))),
        x.ravel(),
        grad,
        eps=1e-5,
    )
    assert err < tol, f"finite-difference disagreement {err:.3g}"


@settings(deadline=None, max_examples=40)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 16))
def test_tape_affine_gradients(seed, n):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(n, n))
    b = rng.normal(size=n)
    v = rng.normal(size=n)
    _check_primitive(
        lambda tape, node: tape.affine(m, node, b),
        lambda x: affine(m, x, b),
        v,
    )
    # and with respect to the matrix
    tape = GradTape()
    mn = Node(m)
    out = tape.affine(mn, v, b)
    tape.backward(out)
    err = finite_diff_check(
        lambda flat: float(np.sum(affine(flat.reshape(n, n), v, b))),
        m.ravel(),
        mn.grad.ravel(),
        eps=1e-5,
    )
    assert err < 1e-5


@settings(deadline=None, max_examples=40)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 16))
def test_tape_leaky_relu_gradients_away_from_kink(seed, n):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=n)
    v[np.abs(v) < 1e-3] = 0.5  # keep coordinates away from the kink at 0
    _check_primitive(
        lambda tape, node: tape.leaky_relu(node, 0.01),
        lambda x: leaky_relu(x, 0.01),
        v,
    )


@settings(deadline=None, max_examples=40)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 16))
def test_tape_abs_normalize_gradients(seed, n):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=n)
    v[np.abs(v) < 1e-2] = 0.5  # |.| is not differentiable at 0
    _check_primitive(
        lambda tape, node: tape.abs_normalize(node),
        lambda x: abs_normalize(x, strict=False),
        v,
    )


def test_tape_clamp_zeroes_gradient_on_clamped_coordinates():
    v = Node(np.array([0.9, 0.05, -0.3]))
    tape = GradTape()
    out = tape.cap_floor_clamp(v, cap=0.6, floor=0.2)
    tape.backward(out)
    # coordinate 0 capped, coordinate 1 floored, coordinate 2 untouched
    assert np.array_equal(v.grad, [0.0, 0.0, 1.0])


@settings(deadline=None, max_examples=40)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 16))
def test_tape_clamp_gradients_away_from_boundaries(seed, n):
    rng = np.random.default_rng(seed)
    v = rng.uniform(0.3, 0.55, size=n) * rng.choice([-1.0, 1.0], size=n)
    _check_primitive(
        lambda tape, node: tape.cap_floor_clamp(node, cap=0.6, floor=0.2),
        lambda x: cap_floor_clamp(x, 0.6, 0.2),
        v,
    )


@settings(deadline=None, max_examples=40)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 12))
def test_tape_linear_mix_gradients(seed, n):
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(n, 5))
    coeffs = rng.normal(size=n)
    _check_primitive(
        lambda tape, node: tape.linear_mix(node, table),
        lambda x: x @ table,
        coeffs,
    )


@settings(deadline=None, max_examples=40)
@given(seed=st.integers(0, 2**31))
def test_tape_mean_softmax_xent_gradients(seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(scale=2.0, size=(4, 6))
    labels = rng.integers(0, 6, size=4)
    node = Node(scores)
    tape = GradTape()
    loss = tape.mean_softmax_xent(node, labels)
    tape.backward(loss)

    def f(flat):
        s = flat.reshape(4, 6)
        total = 0.0
        for row, lab in zip(s, labels):
            total += softmax_xent(row, int(lab))[0]
        return total / 4.0

    err = finite_diff_check(f, scores.ravel(), node.grad.ravel(), eps=1e-5)
    assert err < 1e-5


def test_tape_batch_scores_and_overwrite_columns_gradients():
    rng = np.random.default_rng(11)
    feats = rng.normal(size=(3, 4))
    w = rng.normal(size=(2, 4))
    b = rng.normal(size=2)
    base = rng.normal(size=(3, 5))
    labels = np.array([0, 2, 4])

    def run(wf, bf):
        tape = GradTape()
        wn, bn = Node(wf), Node(bf)
        cols = tape.batch_scores(feats, wn, bn)
        scores = tape.overwrite_columns(base, cols, [1, 3])
        loss = tape.mean_softmax_xent(scores, labels)
        tape.backward(loss)
        return float(loss.value), wn.grad, bn.grad

    loss0, gw, gb = run(w, b)

    def f_w(flat):
        s = base.copy()
        s[:, [1, 3]] = feats @ flat.reshape(2, 4).T + b
        return float(
            np.mean([softmax_xent(row, int(l))[0] for row, l in zip(s, labels)])
        )

    assert finite_diff_check(f_w, w.ravel(), gw.ravel(), eps=1e-5) < 1e-5

    def f_b(flat):
        s = base.copy()
        s[:, [1, 3]] = feats @ w.T + flat
        return float(
            np.mean([softmax_xent(row, int(l))[0] for row, l in zip(s, labels)])
        )

    assert finite_diff_check(f_b, b.ravel(), gb.ravel(), eps=1e-5) < 1e-5
    assert loss0 > 0.0


def test_tape_replay_is_bit_identical():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(6, 6))
    v = rng.normal(size=6)
    b = rng.normal(size=6)
    labels = np.array([2])

    def run():
        tape = GradTape()
        node = Node(v)
        h = tape.leaky_relu(tape.affine(m, node, b), 0.01)
        a = tape.abs_normalize(h)
        scores = tape.overwrite_columns(np.zeros((1, 6)), tape.stack([a]), [0, 1, 2, 3, 4, 5])
        loss = tape.mean_softmax_xent(scores, labels)
        tape.backward(loss)
        return float(loss.value), node.grad.copy()

    loss1, g1 = run()
    loss2, g2 = run()
    assert loss1 == loss2
    assert g1.tobytes() == g2.tobytes()

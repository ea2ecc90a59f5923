"""Gradient checks and contract tests for the tensor/autodiff core.

Every differentiable op is compared against central finite differences;
the tolerances follow the library contract (1e-4 relative, 1e-3 around
saturating nonlinearities).
"""

from __future__ import annotations

import numpy as np
import pytest

from flowcf.numcore import (
    AdamState,
    Graph,
    IndexOutOfBounds,
    MissingGradient,
    NonScalarLoss,
    ShapeMismatch,
    Tensor,
    adam_step,
)

RNG = np.random.default_rng(1234)


def numeric_grad(scalar_fn, x0: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar_fn evaluated at x0 (mutated in place)."""
    grad = np.zeros_like(x0)
    flat, gflat = x0.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = scalar_fn(x0)
        flat[i] = orig - h
        fm = scalar_fn(x0)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def autodiff_grad(op_fn, x0: np.ndarray) -> np.ndarray:
    t = Tensor(x0.copy(), requires_grad=True)
    g = Graph(recording=True, seed=0)
    loss = op_fn(g, t)
    g.backward(loss)
    return t.grad


def check_op(op_fn, x0: np.ndarray, tol: float = 1e-4, h: float = 1e-5):
    """op_fn(graph, tensor) -> scalar Tensor; asserts autodiff matches differences."""

    def scalar_fn(x):
        g = Graph(recording=False, seed=0)
        return float(op_fn(g, Tensor(x)).data)

    got = autodiff_grad(op_fn, x0)
    want = numeric_grad(scalar_fn, x0.copy(), h)
    rel = np.abs(got - want) / np.maximum(np.abs(want), 1.0)
    assert got is not None
    assert rel.max() < tol, f"max rel err {rel.max():.3e}"


def weighted(g: Graph, t: Tensor, w: np.ndarray) -> Tensor:
    """Scalarize an arbitrary-output op with fixed random weights."""
    return g.sum(g.mul(t, Tensor(w)))


# ---------------------------------------------------------------------------
# Gradient checks, op by op
# ---------------------------------------------------------------------------

def test_grad_matmul():
    b = RNG.normal(size=(4, 3))
    w = RNG.normal(size=(2, 3))
    check_op(lambda g, t: weighted(g, g.matmul(t, Tensor(b)), w), RNG.normal(size=(2, 4)))
    a = RNG.normal(size=(2, 4))
    check_op(lambda g, t: weighted(g, g.matmul(Tensor(a), t), w), RNG.normal(size=(4, 3)))


def test_grad_add_sub_mul_scale():
    w = RNG.normal(size=(3, 4))
    other = RNG.normal(size=(3, 4))
    check_op(lambda g, t: weighted(g, g.add(t, Tensor(other)), w), RNG.normal(size=(3, 4)))
    check_op(lambda g, t: weighted(g, g.sub(Tensor(other), t), w), RNG.normal(size=(3, 4)))
    check_op(lambda g, t: weighted(g, g.mul(t, Tensor(other)), w), RNG.normal(size=(3, 4)))
    check_op(lambda g, t: weighted(g, g.scale(t, -2.5), w), RNG.normal(size=(3, 4)))
    check_op(lambda g, t: weighted(g, g.add_const(t, 3.0), w), RNG.normal(size=(3, 4)))


def test_grad_bias_add():
    w = RNG.normal(size=(3, 4))
    mat = RNG.normal(size=(3, 4))
    check_op(lambda g, t: weighted(g, g.add(Tensor(mat), t), w), RNG.normal(size=(4,)))


def test_grad_reductions():
    check_op(lambda g, t: g.sum(t), RNG.normal(size=(3, 4)))
    w0 = RNG.normal(size=(4,))
    check_op(lambda g, t: weighted(g, g.sum(t, axis=0), w0), RNG.normal(size=(3, 4)))
    w1 = RNG.normal(size=(3,))
    check_op(lambda g, t: weighted(g, g.sum(t, axis=1), w1), RNG.normal(size=(3, 4)))
    check_op(lambda g, t: g.mean(t), RNG.normal(size=(5,)))
    mask = (RNG.random((3, 4)) > 0.4).astype(float)
    check_op(lambda g, t: g.masked_mean(t, mask), RNG.normal(size=(3, 4)))
    vec = RNG.normal(size=(6,))
    check_op(lambda g, t: g.dot(t, Tensor(vec)), RNG.normal(size=(6,)))


def test_grad_structure():
    w = RNG.normal(size=(5, 3))
    other = RNG.normal(size=(2, 3))
    check_op(lambda g, t: weighted(g, g.concat([t, Tensor(other)], axis=0), w),
             RNG.normal(size=(3, 3)))
    w2 = RNG.normal(size=(2, 6))
    check_op(lambda g, t: weighted(g, g.concat([Tensor(other), t], axis=1), w2),
             RNG.normal(size=(2, 3)))
    w3 = RNG.normal(size=(2, 4))
    check_op(lambda g, t: weighted(g, g.slice_rows(t, 1, 3), w3), RNG.normal(size=(5, 4)))
    w4 = RNG.normal(size=(5, 2))
    check_op(lambda g, t: weighted(g, g.slice_cols(t, 1, 3), w4), RNG.normal(size=(5, 4)))
    w5 = RNG.normal(size=(12,))
    check_op(lambda g, t: weighted(g, g.reshape(t, (12,)), w5), RNG.normal(size=(3, 4)))


def test_grad_nonlinearities():
    w = RNG.normal(size=(3, 4))
    check_op(lambda g, t: weighted(g, g.sigmoid(t), w), RNG.normal(size=(3, 4)), tol=1e-3)
    check_op(lambda g, t: weighted(g, g.tanh(t), w), RNG.normal(size=(3, 4)), tol=1e-3)
    check_op(lambda g, t: weighted(g, g.softmax(t, axis=1), w), RNG.normal(size=(3, 4)),
             tol=1e-3)
    x = RNG.normal(size=(3, 4))
    x[np.abs(x) < 0.2] = 0.5  # keep away from the |.| kink
    check_op(lambda g, t: weighted(g, g.abs(t), w), x)
    pos = RNG.random((3, 4)) + 0.5
    check_op(lambda g, t: weighted(g, g.sqrt(t), w), pos)
    check_op(lambda g, t: weighted(g, g.reciprocal(t), w), pos)


def test_grad_det():
    base = RNG.normal(size=(3, 3))
    spd = base @ base.T + 3.0 * np.eye(3)
    check_op(lambda g, t: g.det(t), spd.copy())


def test_grad_embedding_lookup():
    idx = np.array([0, 2, 2, 1])
    w = RNG.normal(size=(4, 3))
    check_op(lambda g, t: weighted(g, g.embedding_lookup(t, idx), w),
             RNG.normal(size=(3, 3)))


def test_grad_dropout_seeded():
    w = RNG.normal(size=(4, 4))
    # identical graph seeds draw identical masks, so differences line up
    check_op(lambda g, t: weighted(g, g.dropout(t, 0.4, train=True), w),
             RNG.normal(size=(4, 4)))


def test_grad_cross_entropy_and_hinge():
    labels = np.array([1, 0, 2])
    check_op(lambda g, t: g.cross_entropy(t, labels), RNG.normal(size=(3, 4)), tol=1e-3)
    x = RNG.normal(size=(5,))
    x[3] = x.max() + 0.4  # inside the active hinge region, away from the kink
    check_op(lambda g, t: g.hinge(t, desired=1, margin=1.0), x)


# ---------------------------------------------------------------------------
# Frozen examples
# ---------------------------------------------------------------------------

def test_softmax_uniform():
    g = Graph(recording=False)
    out = g.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)


def test_softmax_rows_sum_to_one():
    g = Graph(recording=False)
    out = g.softmax(Tensor(RNG.normal(size=(7, 5)) * 10), axis=1)
    assert (out.data >= 0).all()
    np.testing.assert_allclose(out.data.sum(axis=1), np.ones(7), atol=1e-9)


def test_embedding_identity_row():
    g = Graph(recording=False)
    out = g.embedding_lookup(Tensor(np.eye(3)), np.array([2]))
    np.testing.assert_array_equal(out.data, [[0.0, 0.0, 1.0]])


def test_embedding_bounds():
    g = Graph(recording=False)
    with pytest.raises(IndexOutOfBounds):
        g.embedding_lookup(Tensor(np.eye(3)), np.array([3]))


def test_cross_entropy_closed_form():
    # -log(softmax([2, 0])[0]) = log(1 + e^-2), evaluated independently
    # with mpmath to 30 digits: 0.126928011042972608...
    g = Graph(recording=False)
    out = g.cross_entropy(Tensor([2.0, 0.0]), 0)
    assert abs(out.item() - 0.12692801104297263) < 1e-15


def test_hinge_examples():
    g = Graph(recording=False)
    assert g.hinge(Tensor([0.0, 0.0, 0.0]), desired=0).item() == pytest.approx(1.0)
    assert g.hinge(Tensor([0.0, 2.0]), desired=0).item() == pytest.approx(3.0)
    assert g.hinge(Tensor([5.0, 2.0, 1.0]), desired=0).item() == 0.0


def test_backward_linear_and_quadratic():
    g = Graph(recording=True)
    x = Tensor(np.ones(4), requires_grad=True)
    g.backward(g.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones(4))

    g = Graph(recording=True)
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    g.backward(g.scale(g.sum(g.mul(x, x)), 0.5))
    np.testing.assert_allclose(x.grad, [1.0, -2.0])


def test_backward_requires_scalar():
    g = Graph(recording=True)
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = g.scale(x, 2.0)
    with pytest.raises(NonScalarLoss):
        g.backward(y)


def test_backward_deterministic():
    def run():
        g = Graph(recording=True)
        x = Tensor(np.arange(6, dtype=float).reshape(2, 3), requires_grad=True)
        y = g.softmax(g.matmul(x, Tensor(np.ones((3, 3)))), axis=1)
        g.backward(g.cross_entropy(y, np.array([0, 1])))
        return x.grad.copy()

    np.testing.assert_array_equal(run(), run())


def test_shape_mismatch_raised():
    g = Graph(recording=False)
    with pytest.raises(ShapeMismatch):
        g.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        g.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    adam_step([p], AdamState())
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert p.grad is None


def test_adam_single_step_closed_form():
    # p=0, g=1, lr=0.005: mhat=1, vhat=1 -> p = -0.005 / (1 + 1e-8)
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([1.0])
    adam_step([p], AdamState(learning_rate=0.005))
    assert abs(p.data[0] - (-0.005 / (1.0 + 1e-8))) < 1e-15


def test_adam_monotone_direction():
    p = Tensor(np.array([0.0]), requires_grad=True)
    state = AdamState(learning_rate=0.01)
    values = [0.0]
    for _ in range(2):
        p.grad = np.array([1.0])
        adam_step([p], state)
        values.append(float(p.data[0]))
    assert values[2] < values[1] < values[0]


def test_adam_missing_gradient():
    p = Tensor(np.array([0.0]), requires_grad=True)
    with pytest.raises(MissingGradient):
        adam_step([p], AdamState())

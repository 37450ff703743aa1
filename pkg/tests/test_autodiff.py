import numpy as np
import pytest
from conftest import central_diff, rel_err

from fedunfold.autodiff import NonFiniteError, ShapeError, Tape, backward, op_apply


def test_matmul_forward():
    tape = Tape()
    A = np.arange(6.0).reshape(2, 3)
    x = np.array([[1.0], [2.0], [3.0]])
    out = op_apply(tape, "matmul", (tape.constant(A), tape.constant(x)))
    np.testing.assert_array_equal(tape.value(out), A @ x)
    assert tape.value(out).shape == (2, 1)


def test_stop_gradient_forward_is_identity():
    tape = Tape()
    x = tape.constant([1.5, -2.0])
    np.testing.assert_array_equal(tape.value(tape.apply("stop_gradient", x)), [1.5, -2.0])


def test_weighted_sum_mean():
    tape = Tape()
    out = tape.apply("weighted_sum", tape.constant([0.5, 0.5]), tape.constant([2.0]), tape.constant([4.0]))
    np.testing.assert_array_equal(tape.value(out), [3.0])


def test_square_gradient():
    tape = Tape()
    x = tape.trainable(3.0)
    y = tape.apply("mul", x, x)
    assert backward(tape, y)[x] == pytest.approx(6.0)


def test_stop_gradient_detaches_one_factor():
    tape = Tape()
    x = tape.trainable(3.0)
    y = tape.apply("mul", tape.apply("stop_gradient", x), x)
    assert backward(tape, y)[x] == pytest.approx(3.0)


def test_backward_needs_scalar_seed():
    tape = Tape()
    x = tape.trainable([1.0, 2.0])
    with pytest.raises(ShapeError):
        backward(tape, x)


def test_shape_mismatch_raises():
    tape = Tape()
    with pytest.raises(ShapeError):
        tape.apply("add", tape.constant([1.0, 2.0]), tape.constant([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeError):
        tape.apply("matmul", tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 1))))


def test_non_finite_forward_raises():
    tape = Tape()
    big = tape.constant([1e308])
    with pytest.raises(NonFiniteError):
        tape.apply("scale_const", big, factor=10.0)


def test_inputs_must_precede():
    tape = Tape()
    tape.constant(1.0)
    with pytest.raises(IndexError):
        op_apply(tape, "relu", (5,))


def test_unreached_trainable_gets_zero():
    tape = Tape()
    a = tape.trainable([1.0, 2.0])
    b = tape.trainable(2.0)
    y = tape.apply("sum", a)
    adj = backward(tape, y)
    np.testing.assert_array_equal(adj[b], 0.0)
    np.testing.assert_array_equal(adj[a], [1.0, 1.0])


# every differentiable op, checked against central differences
def _graph_cases():
    rng = np.random.default_rng(11)
    M = rng.normal(size=(3, 4))
    N = rng.normal(size=(4, 2))
    V = rng.normal(size=(3, 4))
    return {
        "matmul": (M, lambda t, x: t.apply("matmul", x, t.constant(N))),
        "matmul_ta": (M, lambda t, x: t.apply("matmul", x, t.constant(V), transpose_a=True)),
        "matmul_tb": (M, lambda t, x: t.apply("matmul", x, t.constant(V), transpose_b=True)),
        "matmul_right": (N, lambda t, x: t.apply("matmul", t.constant(M), x)),
        "add": (M, lambda t, x: t.apply("add", x, t.constant(V))),
        "sub": (M, lambda t, x: t.apply("sub", t.constant(V), x)),
        "mul": (M, lambda t, x: t.apply("mul", x, x)),
        "add_row": (M[0], lambda t, x: t.apply("add_row", t.constant(V), x)),
        "scale": (np.array(0.7), lambda t, x: t.apply("scale", t.constant(M), x)),
        "scale_x": (M, lambda t, x: t.apply("scale", x, t.constant(1.3))),
        "scale_const": (M, lambda t, x: t.apply("scale_const", x, factor=-2.5)),
        "relu": (M + 0.05, lambda t, x: t.apply("relu", x)),
        "mean": (M, lambda t, x: t.apply("mean", x)),
        "sum_axis0": (M, lambda t, x: t.apply("sum", x, axis=0)),
        "sum_axis1": (M, lambda t, x: t.apply("sum", x, axis=1)),
        "mse": (M, lambda t, x: t.apply("mse", x, t.constant(V))),
        "softmax_row": (M, lambda t, x: t.apply("softmax_row", x)),
        "softmax_vec": (M[0], lambda t, x: t.apply("softmax_row", x)),
        "weighted_sum_w": (
            np.array([0.2, 0.3, 0.5]),
            lambda t, x: t.apply("weighted_sum", x, *[t.constant(r) for r in M]),
        ),
        "weighted_sum_v": (
            M[1],
            lambda t, x: t.apply("weighted_sum", t.constant([0.4, 0.6]), x, t.apply("mul", x, x)),
        ),
        "slice": (M.ravel(), lambda t, x: t.apply("slice", x, start=2, stop=8, shape=(2, 3))),
        "concat": (M, lambda t, x: t.apply("concat", x, t.apply("mul", x, x))),
        "row": (M, lambda t, x: t.apply("row", x, index=1)),
    }


@pytest.mark.parametrize("name", sorted(_graph_cases()))
def test_op_gradients_match_finite_differences(name):
    x0, build = _graph_cases()[name]
    probe = np.random.default_rng(7)

    def scalarize(tape, node):
        v = tape.value(node)
        if v.shape == ():
            return node
        c = tape.constant(probe_weights[: v.size].reshape(v.shape))
        return tape.apply("sum", tape.apply("mul", node, c))

    probe_weights = probe.normal(size=64)

    def f(x):
        t = Tape()
        return float(t.value(scalarize(t, build(t, t.constant(x)))))

    tape = Tape()
    x = tape.trainable(x0)
    y = scalarize(tape, build(tape, x))
    g = backward(tape, y)[x]
    assert rel_err(g, central_diff(f, x0)) <= 1e-3


def test_linearity_of_backward():
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=(3, 3))

    def build(a, b):
        t = Tape()
        x = t.trainable(x0)
        f = t.apply("sum", t.apply("mul", x, x))
        g = t.apply("mean", t.apply("relu", x))
        out = t.apply(
            "add", t.apply("scale_const", f, factor=a), t.apply("scale_const", g, factor=b)
        )
        return backward(t, out)[x]

    a, b = 0.7, -1.9
    combo = build(a, b)
    np.testing.assert_allclose(combo, a * build(1.0, 0.0) + b * build(0.0, 1.0), atol=1e-12, rtol=0)


def test_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(5)
        t = Tape()
        x = t.trainable(rng.normal(size=(4, 3)))
        W = t.constant(rng.normal(size=(3, 2)))
        y = t.apply("softmax_row", t.apply("relu", t.apply("matmul", x, W)))
        return t.value(y)

    assert np.array_equal(run(), run())

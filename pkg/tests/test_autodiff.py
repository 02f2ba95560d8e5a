from __future__ import annotations

import numpy as np
import pytest

from patchweave.autodiff import Graph, NonFiniteError, ShapeError, second_order

from gradcheck import OP_CASES, check_case
from oracles import fd_gradient, rel_error, reference_conv2d, reference_nearest_upsample2x


def test_conv2d_forward_matches_loop_reference():
    rng = np.random.default_rng(0)
    for stride, pad, xs, ws in [
        (1, 1, (2, 3, 5, 4), (4, 3, 3, 3)),
        (2, 1, (2, 3, 6, 5), (4, 3, 3, 3)),
        (1, 0, (1, 2, 4, 4), (3, 2, 1, 1)),
        (2, 0, (2, 2, 7, 5), (2, 2, 3, 3)),
    ]:
        x = rng.uniform(-1, 1, xs)
        w = rng.uniform(-1, 1, ws)
        g = Graph(dtype=np.float64)
        y = g.conv2d(g.placeholder("x", xs), g.placeholder("w", ws), stride, pad)
        got = g.eval({"x": x, "w": w}, y)
        np.testing.assert_allclose(got, reference_conv2d(x, w, stride, pad), atol=1e-12)


def test_upsample2x_forward_matches_loop_reference():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (2, 3, 4, 5))
    g = Graph(dtype=np.float64)
    y = g.upsample2x(g.placeholder("x", x.shape))
    np.testing.assert_array_equal(g.eval({"x": x}, y), reference_nearest_upsample2x(x))


@pytest.mark.parametrize("case", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_gradient_matches_finite_difference(case):
    # quick per-op sweep; the acceptance suite runs the full 20-instance version
    for seed in range(3):
        assert check_case(case, seed=seed) < 1e-4


def test_relu_subgradient_at_zero_is_zero():
    g = Graph(dtype=np.float64)
    x = g.placeholder("x", (3,))
    grad = g.backward(g.sum(g.relu(x)), [x])[x]
    got = g.eval({"x": np.array([-1.0, 0.0, 2.0])}, grad)
    np.testing.assert_array_equal(got, [0.0, 0.0, 1.0])


def test_shared_subexpression_accumulates_gradient():
    # y = x*x + x  =>  dy/dx = 2x + 1
    g = Graph(dtype=np.float64)
    x = g.placeholder("x", (4,))
    y = g.sum(g.add(g.mul(x, x), x))
    grad = g.backward(y, [x])[x]
    xs = np.array([-2.0, 0.5, 1.0, 3.0])
    np.testing.assert_allclose(g.eval({"x": xs}, grad), 2 * xs + 1, rtol=1e-14)


def test_disconnected_leaf_gets_zero_gradient():
    g = Graph(dtype=np.float64)
    x = g.placeholder("x", (2, 2))
    other = g.placeholder("other", (3,))
    grad = g.backward(g.sum(x), [other])[other]
    got = g.eval({"x": np.ones((2, 2)), "other": np.ones(3)}, grad)
    np.testing.assert_array_equal(got, np.zeros(3))


def test_backward_rejects_non_scalar_output():
    g = Graph(dtype=np.float64)
    x = g.placeholder("x", (2, 3))
    with pytest.raises(ShapeError):
        g.backward(x, [x])


def test_gradient_of_output_with_respect_to_itself_is_one():
    g = Graph(dtype=np.float64)
    x = g.placeholder("x", ())
    grad = g.backward(x, [x])[x]
    assert g.eval({"x": np.asarray(5.0)}, grad) == 1.0


def test_second_order_cubic():
    # f(x) = x^3, f''(2) = 12
    g = Graph(dtype=np.float64)
    x = g.placeholder("x", (1,))
    y = g.sum(g.mul(g.mul(x, x), x))
    grads2 = second_order(g, y, x, lambda gr, node: gr.sum(node), [x])
    got = g.eval({"x": np.array([2.0])}, grads2[x])
    np.testing.assert_allclose(got, [12.0], rtol=1e-12)


def test_second_order_gradient_penalty_matches_finite_difference():
    # two-layer net, penalty on the input-gradient norm; checks d(penalty)/d(weights)
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, (3, 4))
    w1 = rng.uniform(-1, 1, (4, 5)) + 0.2 * np.sign(rng.uniform(-1, 1, (4, 5)))
    w2 = rng.uniform(-1, 1, (5, 1))

    def build(g):
        xp = g.placeholder("x", x.shape)
        w1p = g.placeholder("w1", w1.shape)
        w2p = g.placeholder("w2", w2.shape)
        score = g.matmul(g.relu(g.matmul(xp, w1p)), w2p)
        total = g.sum(score)
        gx = g.backward(total, [xp])[xp]
        norms = g.l2norm(gx, (1,))
        penalty = g.mean(g.square(g.add_scalar(norms, -1.0)))
        return xp, w1p, w2p, penalty

    g = Graph(dtype=np.float64)
    xp, w1p, w2p, penalty = build(g)
    grads = g.backward(penalty, [w1p, w2p])
    feeds = {"x": x, "w1": w1, "w2": w2}
    got_w1, got_w2 = g.eval(feeds, [grads[w1p], grads[w2p]])

    def f_of(name):
        def f(val):
            trial = dict(feeds)
            trial[name] = val
            return g.eval(trial, penalty)

        return f

    assert rel_error(got_w1, fd_gradient(f_of("w1"), w1)) < 1e-4
    assert rel_error(got_w2, fd_gradient(f_of("w2"), w2)) < 1e-4


def test_gradient_nodes_are_reusable_across_feeds():
    g = Graph(dtype=np.float64)
    x = g.placeholder("x", (2,))
    grad = g.backward(g.sum(g.square(x)), [x])[x]
    np.testing.assert_allclose(g.eval({"x": np.array([1.0, 2.0])}, grad), [2.0, 4.0])
    np.testing.assert_allclose(g.eval({"x": np.array([-3.0, 0.5])}, grad), [-6.0, 1.0])


def test_bound_parameters_read_current_store_values():
    store = {"w": np.array([1.0, 2.0])}
    g = Graph(params=store, dtype=np.float64)
    y = g.sum(g.square(g.bound("w")))
    assert g.eval({}, y) == 5.0
    store["w"] = np.array([3.0, 0.0])
    assert g.eval({}, y) == 9.0


def test_bound_parameter_requires_existing_entry():
    g = Graph(params={}, dtype=np.float64)
    with pytest.raises(KeyError):
        g.bound("missing")


def test_missing_placeholder_feed_raises():
    g = Graph(dtype=np.float64)
    x = g.placeholder("x", (2,))
    y = g.placeholder("y", (2,))
    out = g.add(x, y)
    with pytest.raises(KeyError, match="y"):
        g.eval({"x": np.zeros(2)}, out)


def test_shape_mismatches_raise_with_both_shapes():
    g = Graph(dtype=np.float64)
    a = g.placeholder("a", (2, 3))
    b = g.placeholder("b", (3, 2))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        g.add(a, b)
    with pytest.raises(ShapeError):
        g.matmul(a, a)
    with pytest.raises(ShapeError):
        g.concat([a, b], 0)
    with pytest.raises(ShapeError):
        g.reshape(a, (7,))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_intermediate_reports_offending_node():
    g = Graph(dtype=np.float64)
    x = g.placeholder("x", (2,))
    y = g.sqrt(x)
    with pytest.raises(NonFiniteError) as exc:
        g.eval({"x": np.array([1.0, -1.0])}, g.sum(y))
    assert exc.value.node.op == "sqrt"


def test_nonfinite_feed_reports_placeholder():
    g = Graph(dtype=np.float64)
    x = g.placeholder("x", (2,))
    with pytest.raises(NonFiniteError) as exc:
        g.eval({"x": np.array([np.inf, 0.0])}, g.sum(x))
    assert exc.value.node.op == "placeholder"


def test_eval_computes_only_ancestors_of_requested_outputs():
    # the unused branch would blow up if evaluated
    g = Graph(dtype=np.float64)
    x = g.placeholder("x", (2,))
    good = g.sum(x)
    g.sqrt(g.add_scalar(x, -10.0))  # would be NaN
    assert g.eval({"x": np.array([1.0, 2.0])}, good) == 3.0


def test_conv_strict_channel_check():
    g = Graph(dtype=np.float64)
    x = g.placeholder("x", (1, 3, 4, 4))
    w = g.placeholder("w", (2, 4, 3, 3))
    with pytest.raises(ShapeError):
        g.conv2d(x, w, 1, 1)


def test_float32_graph_keeps_float32():
    g = Graph(dtype=np.float32)
    x = g.placeholder("x", (3,))
    out = g.eval({"x": np.arange(3, dtype=np.float64)}, g.tanh(g.scale(x, 2.0)))
    assert out.dtype == np.float32

import numpy as np
import pytest

from raingraph import autodiff as ad

from oracles import central_difference


def _check(build, shapes, seed=0, positive=False):
    """Taped gradient of ||build(xs) - C||^2 against central differences."""
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]
    C = rng.normal(size=np.shape(build(*xs)))

    def f():
        return float(np.sum((build(*xs) - C) ** 2))

    tape = ad.Tape()
    ts = [tape.variable(x) for x in xs]
    loss = ad.frobenius_sq(ad.sub(build(*ts), C))
    grads = ad.backward(tape, loss, ts)
    for g, n in zip(grads, central_difference(f, xs, h=1e-6)):
        np.testing.assert_allclose(g, n, rtol=1e-6, atol=1e-6)


def test_matmul_add_sub_grads():
    _check(ad.matmul, [(4, 3), (3, 5)])
    _check(ad.add, [(3, 2), (3, 2)])
    _check(ad.sub, [(3, 2), (3, 2)])
    _check(ad.add_row, [(4, 3), (1, 3)])


def test_elementwise_grads():
    _check(lambda a: ad.scale(a, -1.7), [(3, 3)])
    _check(lambda a, c: ad.mul_col(a, c), [(5, 2), (5, 1)])
    _check(ad.exp, [(2, 3)])
    # keep inputs away from the kink at 0
    _check(lambda a: ad.relu(ad.sub(a, np.full((3, 4), 0.2))), [(3, 4)], positive=True)
    _check(lambda a: ad.leaky_relu(a, 0.2), [(6, 2)], seed=4)
    _check(ad.reduce_sum, [(3, 4)])
    _check(ad.frobenius_sq, [(3, 4)])


def test_graph_primitive_grads():
    idx = np.array([0, 2, 2, 1, 0, 3])
    _check(lambda a: ad.gather_rows(a, idx), [(4, 3)])
    _check(lambda a: ad.scatter_add(a, idx, 5), [(6, 2)])
    _check(lambda s: ad.neighborhood_softmax(s, idx, 4), [(6, 1)])


def test_examples():
    np.testing.assert_array_equal(ad.leaky_relu(np.array([[-1.0, 0.0, 2.0]]), 0.2), [[-0.2, 0.0, 2.0]])
    x = np.random.default_rng(0).normal(size=(3, 3))
    assert ad.frobenius_sq(ad.sub(x, x))[0, 0] == 0.0
    alpha = ad.neighborhood_softmax(np.array([[3.0], [1.0], [2.0]]), np.array([0, 1, 1]), 2)
    assert alpha[0, 0] == 1.0
    assert alpha[1, 0] + alpha[2, 0] == pytest.approx(1.0, abs=1e-15)


def test_softmax_is_stable_for_large_scores():
    alpha = ad.neighborhood_softmax(np.array([[1000.0], [999.0]]), np.array([0, 0]), 1)
    assert np.isfinite(alpha).all()
    assert alpha[0, 0] == pytest.approx(1 / (1 + np.exp(-1)))


def test_scatter_add_matches_loop():
    rng = np.random.default_rng(2)
    idx = rng.integers(0, 7, size=40)
    vals = rng.normal(size=(40, 3))
    expect = np.zeros((7, 3))
    for k, i in enumerate(idx):
        expect[i] += vals[k]
    np.testing.assert_allclose(ad.scatter_add(vals, idx, 7), expect, rtol=1e-13)


def test_shape_errors():
    with pytest.raises(ad.ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ad.ShapeError):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ad.ShapeError):
        ad.gather_rows(np.ones((2, 2)), [0, 5])
    with pytest.raises(ad.ShapeError):
        ad.neighborhood_softmax(np.ones((3, 2)), [0, 0, 1], 2)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.exp(np.array([[1000.0]]))
    with pytest.raises(FloatingPointError):
        ad.scale(np.array([[1e308]]), 10.0)


def test_unreached_parameter_gets_zero_gradient():
    tape = ad.Tape()
    a = tape.variable(np.ones((2, 2)))
    b = tape.variable(np.full((3, 1), 2.0))
    loss = ad.reduce_sum(a)
    ga, gb = ad.backward(tape, loss, [a, b])
    np.testing.assert_array_equal(ga, np.ones((2, 2)))
    np.testing.assert_array_equal(gb, np.zeros((3, 1)))


def test_reused_tensor_accumulates():
    tape = ad.Tape()
    x = tape.variable(np.array([[3.0]]))
    loss = ad.add(ad.matmul(x, x), x)      # x^2 + x
    (g,) = ad.backward(tape, loss, [x])
    assert g[0, 0] == 7.0


def test_backward_rejects_non_scalar_and_foreign_loss():
    tape = ad.Tape()
    x = tape.variable(np.ones((2, 2)))
    with pytest.raises(ad.ShapeError):
        ad.backward(tape, ad.scale(x, 2.0), [x])
    other = ad.Tape()
    y = other.variable(np.ones((1, 1)))
    with pytest.raises(ad.TapeError):
        ad.backward(tape, y, [x])
    with pytest.raises(ad.TapeError):
        ad.add(ad.matmul(y, np.ones((1, 2))), ad.gather_rows(x, [0]))


def test_plain_arrays_skip_the_tape():
    out = ad.matmul(np.ones((2, 2)), np.ones((2, 1)))
    assert isinstance(out, np.ndarray)


def test_closed_form_gradients():
    rng = np.random.default_rng(1)
    A, B, W0 = rng.normal(size=(5, 3)), rng.normal(size=(5, 2)), rng.normal(size=(3, 2))
    tape = ad.Tape()
    W = tape.variable(W0)
    (g,) = ad.backward(tape, ad.reduce_sum(W), [W])
    np.testing.assert_array_equal(g, np.ones((3, 2)))
    tape = ad.Tape()
    W = tape.variable(W0)
    (g,) = ad.backward(tape, ad.frobenius_sq(ad.sub(ad.matmul(A, W), B)), [W])
    np.testing.assert_allclose(g, 2 * A.T @ (A @ W0 - B), rtol=1e-13)


def test_edge_aggregate_grads_and_loop():
    rng = np.random.default_rng(6)
    dst = np.array([0, 1, 1, 2, 3, 3, 0, 2, 2])
    src = np.array([1, 0, 2, 2, 1, 0, 0, 3, 3])      # includes a repeated (2, 3) edge
    layout = ad.Aggregate(dst, src, 4)
    _check(lambda w, h: ad.edge_aggregate(w, h, layout), [(9, 1), (4, 3)])
    w, h = rng.normal(size=(9, 1)), rng.normal(size=(4, 3))
    expect = np.zeros((4, 3))
    for e in range(9):
        expect[dst[e]] += w[e, 0] * h[src[e]]
    np.testing.assert_allclose(ad.edge_aggregate(w, h, layout), expect, rtol=1e-13)


def test_edge_aggregate_chunked_weight_gradient(monkeypatch):
    rng = np.random.default_rng(7)
    dst, src = rng.integers(0, 5, 40), rng.integers(0, 5, 40)
    layout = ad.Aggregate(dst, src, 5)
    w0, h0 = rng.normal(size=(40, 1)), rng.normal(size=(5, 3))

    def grads():
        tape = ad.Tape()
        w, h = tape.variable(w0), tape.variable(h0)
        return ad.backward(tape, ad.frobenius_sq(ad.edge_aggregate(w, h, layout)), [w, h])

    full = grads()
    monkeypatch.setattr(ad, "EDGE_CHUNK_BYTES", 8 * 3 * 7)    # 7 edges per chunk
    chunked = grads()
    for a, b in zip(full, chunked):
        np.testing.assert_array_equal(a, b)


def test_edge_aggregate_shape_errors():
    layout = ad.Aggregate([0, 1], [1, 0], 2)
    with pytest.raises(ad.ShapeError):
        ad.edge_aggregate(np.ones((3, 1)), np.ones((2, 2)), layout)
    with pytest.raises(ad.ShapeError):
        ad.edge_aggregate(np.ones((2, 1)), np.ones((3, 2)), layout)
    with pytest.raises(ad.ShapeError):
        ad.Aggregate([0, 5], [1, 0], 2)

"""Tests for the reverse-mode core.

Gradients are checked against central finite differences and, for the
affine op, against a triple-loop matmul oracle so the vectorized path
never validates itself.
"""
import numpy as np
import pytest

from setprune import autodiff as ad
from setprune.errors import DimensionError, EmptySetError


def loop_matmul(x, w, b):
    n, d = x.shape
    d2, h = w.shape
    out = np.zeros((n, h))
    for i in range(n):
        for j in range(h):
            acc = 0.0
            for k in range(d):
                acc += x[i, k] * w[k, j]
            out[i, j] = acc + b[0, j]
    return out


def fd_gradient(f, x, step=None):
    """Central differences, elementwise, step scaled by magnitude."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        h = (1e-6 * (1.0 + abs(x[idx]))) if step is None else step
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

def test_affine_identity():
    x = np.arange(6, dtype=np.float64).reshape(2, 3)
    out = ad.affine_value(x, np.eye(3), np.zeros((1, 3)))
    assert np.array_equal(out, x)


def test_affine_hand_case():
    x = np.array([[1.0, 2.0]])
    w = np.array([[1.0, 0.0, -1.0], [0.5, 2.0, 1.0]])
    b = np.array([[10.0, 20.0, 30.0]])
    expected = np.array([[1 + 1 + 10, 4 + 20, -1 + 2 + 30]], dtype=np.float64)
    assert np.array_equal(ad.affine_value(x, w, b), expected)


def test_affine_against_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n, d, h = rng.integers(1, 7, size=3)
        x = rng.standard_normal((n, d))
        w = rng.standard_normal((d, h))
        b = rng.standard_normal((1, h))
        got = ad.affine_value(x, w, b)
        assert np.max(np.abs(got - loop_matmul(x, w, b))) <= 1e-12


def test_affine_shape_mismatch():
    with pytest.raises(DimensionError, match=r"2"):
        ad.affine_value(np.zeros((3, 2)), np.zeros((4, 5)), np.zeros((1, 5)))


def test_relu_value():
    x = np.array([[-1.0, 0.0, 2.5]])
    assert np.array_equal(ad.relu_value(x), np.array([[0.0, 0.0, 2.5]]))


def test_feature_max_hand_case():
    f = np.array([[1.0, 5.0], [3.0, 2.0], [2.0, 4.0]])
    pooled, witness = ad.feature_max_value(f)
    assert np.array_equal(pooled, np.array([[3.0, 5.0]]))
    assert np.array_equal(witness, np.array([1, 0]))


def test_feature_max_tie_takes_lowest_row():
    f = np.array([[2.0, 1.0], [2.0, 3.0], [2.0, 3.0]])
    pooled, witness = ad.feature_max_value(f)
    assert np.array_equal(pooled, np.array([[2.0, 3.0]]))
    assert np.array_equal(witness, np.array([0, 1]))


def test_feature_max_empty_raises():
    with pytest.raises(EmptySetError):
        ad.feature_max_value(np.zeros((0, 4)))


def test_softmax_xent_uniform_logits_gives_log_c():
    for c in (2, 3, 7):
        loss, probs = ad.softmax_xent_value(np.zeros((1, c)), 0)
        assert abs(float(loss[0, 0]) - np.log(c)) <= 1e-12
        assert np.allclose(probs, 1.0 / c, atol=1e-12)


def test_softmax_xent_two_class_ln2():
    loss, _ = ad.softmax_xent_value(np.array([[0.0, 0.0]]), 1)
    assert abs(float(loss[0, 0]) - np.log(2.0)) <= 1e-15


def test_softmax_xent_overflow_stable():
    loss, probs = ad.softmax_xent_value(np.array([[1000.0, 0.0]]), 0)
    assert np.isfinite(float(loss[0, 0]))
    assert float(loss[0, 0]) <= 1e-12
    assert np.all(np.isfinite(probs))
    # and the losing class when the logit gap is huge
    loss, _ = ad.softmax_xent_value(np.array([[1000.0, 0.0]]), 1)
    assert abs(float(loss[0, 0]) - 1000.0) <= 1e-9


def test_softmax_xent_rejects_single_class_and_bad_label():
    with pytest.raises(DimensionError):
        ad.softmax_xent_value(np.array([[1.0]]), 0)
    with pytest.raises(IndexError):
        ad.softmax_xent_value(np.array([[1.0, 2.0]]), 2)


def test_as_matrix_promotes_vectors():
    v = np.array([1.0, 2.0, 3.0])
    m = ad.as_matrix(v)
    assert m.shape == (1, 3)
    with pytest.raises(DimensionError):
        ad.as_matrix(np.zeros((2, 2, 2)))


# ---------------------------------------------------------------------------
# tape and traced forward equals untraced forward
# ---------------------------------------------------------------------------

def _build_chain(tape, x, w1, b1, w2, b2, y):
    xi = tape.leaf(x)
    f = tape.relu(tape.affine(xi, tape.leaf(w1), tape.leaf(b1)))
    pooled = tape.feature_max(f)
    logits = tape.affine(pooled, tape.leaf(w2), tape.leaf(b2))
    loss = tape.softmax_xent(logits, y)
    return xi, loss


def _random_chain_params(rng, n=5, d=3, h=4, c=3):
    x = rng.standard_normal((n, d))
    w1 = rng.standard_normal((d, h))
    b1 = rng.standard_normal((1, h))
    w2 = rng.standard_normal((h, c))
    b2 = rng.standard_normal((1, c))
    y = int(rng.integers(0, c))
    return x, w1, b1, w2, b2, y


def test_traced_forward_bit_identical_to_untraced():
    rng = np.random.default_rng(7)
    for _ in range(10):
        x, w1, b1, w2, b2, y = _random_chain_params(rng)
        tape = ad.Tape()
        _, loss_id = _build_chain(tape, x, w1, b1, w2, b2, y)
        f = ad.relu_value(ad.affine_value(x, w1, b1))
        pooled, _ = ad.feature_max_value(f)
        logits = ad.affine_value(pooled, w2, b2)
        loss, _ = ad.softmax_xent_value(logits, y)
        assert np.array_equal(tape.value(loss_id), loss)


def test_tape_replay_is_bit_exact():
    rng = np.random.default_rng(11)
    x, w1, b1, w2, b2, y = _random_chain_params(rng)
    tape = ad.Tape()
    _build_chain(tape, x, w1, b1, w2, b2, y)
    tape.replay()  # raises if any node recomputes differently


def test_tape_witness_exposed():
    f = np.array([[1.0, 5.0], [3.0, 2.0]])
    tape = ad.Tape()
    pid = tape.feature_max(tape.leaf(f))
    assert np.array_equal(tape.witness(pid), np.array([1, 0]))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_requires_scalar():
    tape = ad.Tape()
    xi = tape.leaf(np.ones((2, 3)))
    out = tape.relu(xi)
    with pytest.raises(DimensionError):
        ad.backward(tape, out)


def test_backward_identity_chain_is_ones():
    # loss = sum of x via affine with all-ones reduction column
    x = np.array([[1.0, -2.0, 3.0]])
    tape = ad.Tape()
    xi = tape.leaf(x)
    out = tape.affine(xi, tape.leaf(np.ones((3, 1))), tape.leaf(np.zeros((1, 1))))
    grads = ad.backward(tape, out)
    assert np.array_equal(grads[xi], np.ones((1, 3)))


def test_backward_untouched_leaf_gets_zeros():
    tape = ad.Tape()
    xi = tape.leaf(np.ones((1, 2)))
    unused = tape.leaf(np.ones((3, 3)))
    out = tape.affine(xi, tape.leaf(np.ones((2, 1))), tape.leaf(np.zeros((1, 1))))
    grads = ad.backward(tape, out)
    assert grads[unused].shape == (3, 3)
    assert np.all(grads[unused] == 0.0)


def test_feature_max_grad_routes_to_witness_rows_only():
    f = np.array([[1.0, 5.0], [3.0, 2.0], [2.0, 4.0]])
    tape = ad.Tape()
    fi = tape.leaf(f)
    pooled = tape.feature_max(fi)
    # reduce pooled to a scalar with known weights
    w = np.array([[2.0], [7.0]])
    out = tape.affine(pooled, tape.leaf(w), tape.leaf(np.zeros((1, 1))))
    grads = ad.backward(tape, out)
    expected = np.zeros_like(f)
    expected[1, 0] = 2.0  # witness of column 0
    expected[0, 1] = 7.0  # witness of column 1
    assert np.array_equal(grads[fi], expected)


def test_feature_max_grad_mass_conserved():
    rng = np.random.default_rng(3)
    for _ in range(20):
        f = rng.standard_normal((6, 5))
        tape = ad.Tape()
        fi = tape.leaf(f)
        pooled = tape.feature_max(fi)
        w = rng.standard_normal((5, 1))
        out = tape.affine(pooled, tape.leaf(w), tape.leaf(np.zeros((1, 1))))
        grads = ad.backward(tape, out)
        # per column: total mass equals the pooled adjoint, on a single row
        assert np.allclose(grads[fi].sum(axis=0), w[:, 0], atol=1e-15)
        assert np.all((grads[fi] != 0).sum(axis=0) <= 1)


def test_softmax_xent_gradient_range():
    rng = np.random.default_rng(5)
    for _ in range(50):
        c = int(rng.integers(2, 8))
        logits = rng.standard_normal((1, c)) * 5
        y = int(rng.integers(0, c))
        tape = ad.Tape()
        li = tape.leaf(logits)
        loss = tape.softmax_xent(li, y)
        g = ad.backward(tape, loss)[li]
        # gradient is probs - onehot: entries in (-1, 1), sums to 0
        assert np.all(g > -1.0) and np.all(g < 1.0)
        assert abs(g.sum()) <= 1e-12


def test_backward_matches_fd_on_full_chain():
    rng = np.random.default_rng(13)
    x, w1, b1, w2, b2, y = _random_chain_params(rng)

    def loss_of_x(xv):
        f = ad.relu_value(ad.affine_value(xv, w1, b1))
        pooled, _ = ad.feature_max_value(f)
        logits = ad.affine_value(pooled, w2, b2)
        loss, _ = ad.softmax_xent_value(logits, y)
        return float(loss[0, 0])

    tape = ad.Tape()
    xi, loss_id = _build_chain(tape, x, w1, b1, w2, b2, y)
    g = ad.backward(tape, loss_id)[xi]
    assert rel_err(g, fd_gradient(loss_of_x, x)) <= 1e-6


def test_backward_matches_fd_on_all_parameters():
    rng = np.random.default_rng(17)
    x, w1, b1, w2, b2, y = _random_chain_params(rng, n=4, d=2, h=3, c=3)
    tape = ad.Tape()
    xi = tape.leaf(x)
    w1i, b1i = tape.leaf(w1), tape.leaf(b1)
    w2i, b2i = tape.leaf(w2), tape.leaf(b2)
    f = tape.relu(tape.affine(xi, w1i, b1i))
    logits = tape.affine(tape.feature_max(f), w2i, b2i)
    loss_id = tape.softmax_xent(logits, y)
    grads = ad.backward(tape, loss_id)

    def loss_with(**kw):
        vals = dict(x=x, w1=w1, b1=b1, w2=w2, b2=b2)
        vals.update(kw)
        fv = ad.relu_value(ad.affine_value(vals["x"], vals["w1"], vals["b1"]))
        pooled, _ = ad.feature_max_value(fv)
        lg = ad.affine_value(pooled, vals["w2"], vals["b2"])
        loss, _ = ad.softmax_xent_value(lg, y)
        return float(loss[0, 0])

    for name, leaf, val in [("x", xi, x), ("w1", w1i, w1), ("b1", b1i, b1),
                            ("w2", w2i, w2), ("b2", b2i, b2)]:
        fd = fd_gradient(lambda v, _n=name: loss_with(**{_n: v}), val)
        assert rel_err(grads[leaf], fd) <= 1e-5, name


def test_backward_deterministic_across_reruns():
    rng = np.random.default_rng(19)
    x, w1, b1, w2, b2, y = _random_chain_params(rng)

    def run():
        tape = ad.Tape()
        xi, loss_id = _build_chain(tape, x, w1, b1, w2, b2, y)
        return ad.backward(tape, loss_id)[xi].copy()

    assert np.array_equal(run(), run())


def test_relu_subgradient_zero_at_kink():
    x = np.array([[0.0, -1.0, 1.0]])
    tape = ad.Tape()
    xi = tape.leaf(x)
    out = tape.affine(tape.relu(xi), tape.leaf(np.ones((3, 1))), tape.leaf(np.zeros((1, 1))))
    g = ad.backward(tape, out)[xi]
    assert np.array_equal(g, np.array([[0.0, 0.0, 1.0]]))


# ---------------------------------------------------------------------------
# precision switch
# ---------------------------------------------------------------------------

def test_default_dtype_switch():
    assert ad.default_dtype() == np.float64
    try:
        ad.set_default_dtype(np.float32)
        out = ad.affine_value(np.ones((1, 2), dtype=np.float32),
                              np.ones((2, 2), dtype=np.float32),
                              np.zeros((1, 2), dtype=np.float32))
        assert out.dtype == np.float32
    finally:
        ad.set_default_dtype(np.float64)


def test_default_dtype_rejects_others():
    with pytest.raises(DimensionError):
        ad.set_default_dtype(np.int32)

import math

import numpy as np
import pytest
import scipy.sparse as sp

import dignn.autodiff as ad
from dignn.errors import DimensionError, InvalidLabelError


def fd_grad(f, x, h=1e-6):
    """Central finite differences of scalar f at matrix x."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-5))


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(ad.Var([[1, 0], [0, 1]]), ad.Var([[3], [4]]))
        assert np.array_equal(out.value, [[3], [4]])

    def test_hand_multiplication(self):
        out = ad.matmul(ad.Var([[1, 2], [3, 4]]), ad.Var([[1], [1]]))
        assert np.array_equal(out.value, [[3], [7]])

    def test_gradient_matches_finite_differences(self):
        a = ad.Var([[1, 2], [3, 4]])
        b = ad.Var([[1], [1]])
        loss = ad.sum_all(ad.matmul(a, b))
        ad.backward(loss)
        fd = fd_grad(lambda: float(ad.sum_all(ad.matmul(a, b)).value[0, 0]), a.value)
        assert np.allclose(a.grad, [[1, 1], [1, 1]])
        assert rel_err(fd, a.grad) <= 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError, match=r"\(2, 2\).*\(3, 1\)"):
            ad.matmul(ad.Var(np.ones((2, 2))), ad.Var(np.ones((3, 1))))


class TestSparseDenseMatmul:
    def test_empty_row_gives_zero_row(self):
        s = sp.csr_matrix((1, 3))
        out = ad.sparse_dense_matmul(s, ad.Var(np.ones((3, 2))))
        assert np.array_equal(out.value, np.zeros((1, 2)))

    def test_sparse_identity(self):
        s = sp.identity(4, format="csr")
        b = np.arange(8.0).reshape(4, 2)
        out = ad.sparse_dense_matmul(s, ad.Var(b))
        assert np.array_equal(out.value, b)

    def test_matches_densified_matmul(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            s = sp.random(5, 7, density=0.3, random_state=rng, format="csr")
            b = ad.Var(rng.standard_normal((7, 3)))
            out = ad.sparse_dense_matmul(s, b)
            assert np.max(np.abs(out.value - s.toarray() @ b.value)) <= 1e-12

    def test_gradient_flows_to_dense_only(self):
        s = sp.random(4, 5, density=0.5, random_state=1, format="csr")
        b = ad.Var(np.random.default_rng(1).standard_normal((5, 2)))
        loss = ad.sum_all(ad.sparse_dense_matmul(s, b))
        ad.backward(loss)
        fd = fd_grad(lambda: float((s @ b.value).sum()), b.value)
        assert rel_err(fd, b.grad) <= 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.sparse_dense_matmul(sp.csr_matrix((2, 3)), ad.Var(np.ones((4, 1))))


class TestElementwise:
    def test_tanh_at_zero(self):
        x = ad.Var([[0.0]])
        y = ad.elementwise(x, "tanh")
        ad.backward(ad.sum_all(y))
        assert y.value[0, 0] == 0.0
        assert x.grad[0, 0] == 1.0

    def test_relu_negative(self):
        x = ad.Var([[-2.5]])
        y = ad.elementwise(x, "relu")
        ad.backward(ad.sum_all(y))
        assert y.value[0, 0] == 0.0
        assert x.grad[0, 0] == 0.0

    def test_sigmoid_at_zero(self):
        x = ad.Var([[0.0]])
        y = ad.elementwise(x, "sigmoid")
        ad.backward(ad.sum_all(y))
        assert y.value[0, 0] == 0.5
        assert x.grad[0, 0] == pytest.approx(0.25, abs=1e-15)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ad.elementwise(ad.Var([[0.0]]), "softplus")


class TestRowSoftmax:
    def test_symmetry(self):
        out = ad.row_softmax(ad.Var([[0.0, 0.0]]))
        assert np.allclose(out.value, [[0.5, 0.5]])

    def test_stability_under_large_inputs(self):
        out = ad.row_softmax(ad.Var([[1000.0, 1000.0]]))
        assert np.all(np.isfinite(out.value))
        assert np.allclose(out.value, [[0.5, 0.5]])

    def test_closed_form(self):
        out = ad.row_softmax(ad.Var([[math.log(3), math.log(1)]]))
        assert np.allclose(out.value, [[0.75, 0.25]], atol=1e-12)

    def test_rows_sum_to_one_for_extreme_entries(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1e4, 1e4, size=(6, 5))
        out = ad.row_softmax(ad.Var(x))
        assert np.all(out.value >= 0)
        assert np.max(np.abs(out.value.sum(axis=1) - 1.0)) <= 1e-12


class TestCeWithLogits:
    def test_confident_correct(self):
        loss = ad.ce_with_logits(ad.Var([[40.0, -40.0]]), [0])
        assert loss.value[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_uniform_prediction(self):
        loss = ad.ce_with_logits(ad.Var([[0.0, 0.0]]), [1])
        assert loss.value[0, 0] == pytest.approx(math.log(2), abs=1e-12)

    def test_against_per_sample_oracle(self):
        logits = np.array([[1.0, 0.0], [0.0, 1.0]])
        labels = [1, 0]
        expected = 0.0
        for row, lab in zip(logits, labels):
            p = np.exp(row) / np.exp(row).sum()
            expected += -math.log(p[lab])
        expected /= 2
        loss = ad.ce_with_logits(ad.Var(logits), labels)
        assert loss.value[0, 0] == pytest.approx(expected, abs=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        z = rng.standard_normal((4, 2))
        labels = [0, 1, 1, 0]
        a = ad.ce_with_logits(ad.Var(z), labels).value[0, 0]
        b = ad.ce_with_logits(ad.Var(z + 7.3), labels).value[0, 0]
        assert abs(a - b) <= 1e-10

    def test_invalid_label(self):
        with pytest.raises(InvalidLabelError):
            ad.ce_with_logits(ad.Var([[0.0, 0.0]]), [2])


class TestMse:
    def test_zero_when_equal(self):
        t = np.array([[1.0, 2.0]])
        assert ad.mse(ad.Var(t), t).value[0, 0] == 0.0

    def test_single_entry(self):
        assert ad.mse(ad.Var([[1.0]]), [[0.0]]).value[0, 0] == 1.0

    def test_mean_over_entries(self):
        assert ad.mse(ad.Var([[1.0, 2.0]]), [[0.0, 0.0]]).value[0, 0] == 2.5

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.mse(ad.Var(np.ones((2, 2))), np.ones((2, 3)))


class TestBackward:
    def test_tanh_at_zero_grad_ones(self):
        x = ad.Var(np.zeros((3, 2)))
        ad.backward(ad.sum_all(ad.tanh(x)))
        assert np.array_equal(x.grad, np.ones((3, 2)))

    def test_unused_parameter_gets_zero_grad(self):
        x = ad.Var(np.ones((2, 2)))
        unused = ad.Var(np.ones((2, 2)))
        ad.backward(ad.sum_all(x))
        assert np.array_equal(unused.grad, np.zeros((2, 2)))

    def test_accumulation_without_zeroing(self):
        x = ad.Var(np.zeros((2, 2)))
        ad.backward(ad.sum_all(ad.tanh(x)))
        first = x.grad.copy()
        ad.backward(ad.sum_all(ad.tanh(x)))
        assert np.array_equal(x.grad, 2 * first)

    def test_rejects_non_scalar(self):
        with pytest.raises(DimensionError):
            ad.backward(ad.Var(np.ones((2, 2))))

    def test_deterministic_loss(self):
        def run():
            rng = np.random.default_rng(11)
            x = ad.Var(rng.standard_normal((4, 3)))
            w = ad.Var(rng.standard_normal((3, 2)))
            return ad.ce_with_logits(ad.matmul(ad.tanh(x), w), [0, 1, 0, 1]).value[0, 0]

        assert run() == run()


@pytest.mark.parametrize("seed", range(5))
def test_all_ops_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, k, m = rng.integers(2, 8, size=3)
    labels = rng.integers(0, 2, size=int(n)).tolist()
    target = rng.standard_normal((n, m))
    s = sp.random(int(n), int(k), density=0.4, random_state=int(seed), format="csr")

    def build(a_val, b_val):
        a = ad.Var(a_val)
        b = ad.Var(b_val)
        h = ad.matmul(a, b)                       # (n, m)
        h = ad.add(h, ad.Var(rng_bias))
        h = ad.tanh(h)
        h = ad.add(h, ad.relu(ad.sparse_dense_matmul(s, b)))
        sm = ad.row_softmax(h)
        ce = ad.ce_with_logits(ad.take_cols(ad.sigmoid(h), 0, 2), labels) \
            if m >= 2 else ad.sum_all(sm)
        return ad.add(ad.add(ce, ad.mse(h, target)), ad.scale(ad.sum_all(ad.square(sm)), 0.1)), a, b

    a_val = rng.standard_normal((n, k))
    b_val = rng.standard_normal((k, m))
    rng_bias = rng.standard_normal((1, m))
    loss, a, b = build(a_val, b_val)
    ad.backward(loss)
    for var, val in ((a, a_val), (b, b_val)):
        fd = fd_grad(lambda: float(build(val, b_val)[0].value[0, 0])
                     if var is a else float(build(a_val, val)[0].value[0, 0]),
                     val)
        assert rel_err(fd, var.grad) <= 1e-4


class TestAdam:
    def test_first_step_delta(self):
        p = ad.Var([[0.0]])
        opt = ad.Adam({"p": p}, lr=0.001, weight_decay=0.0)
        p.grad[...] = 1.0
        opt.step()
        assert p.value[0, 0] == pytest.approx(-0.001, rel=1e-6)
        assert opt.t == 1

    def test_zero_gradient_leaves_parameter(self):
        p = ad.Var([[1.5]])
        opt = ad.Adam({"p": p}, weight_decay=0.0)
        opt.step()
        assert p.value[0, 0] == 1.5

    def test_bias_correction_shrinks_step(self):
        p = ad.Var([[0.0]])
        opt = ad.Adam({"p": p}, lr=0.001, weight_decay=0.0)
        p.grad[...] = 0.7
        before = p.value[0, 0]
        opt.step()
        d1 = abs(p.value[0, 0] - before)
        before = p.value[0, 0]
        p.grad[...] = 0.7
        opt.step()
        d2 = abs(p.value[0, 0] - before)
        assert d2 <= d1 * (1 + 1e-6)

    def test_weight_decay_skips_no_decay(self):
        w = ad.Var([[1.0]])
        b = ad.Var([[1.0]])
        opt = ad.Adam({"w": w, "b": b}, lr=0.001, weight_decay=0.5, no_decay={"b"})
        opt.step()
        assert w.value[0, 0] != 1.0  # decay acted as a gradient on w
        assert b.value[0, 0] == 1.0

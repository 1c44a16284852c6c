"""Tape autodiff tests: hand values, finite-difference oracles, determinism."""

import numpy as np
import pytest

from evsharp import autodiff as ad


def make(*arrays):
    tape = ad.Tape()
    return tape, [tape.var(a, requires_grad=True) for a in arrays]


class TestForward:
    def test_add(self):
        _, (x, y) = make(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
        assert np.allclose((x + y).value, [4, 6])

    def test_log_exp_inverse_pair(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0.1, 5.0, size=(3, 4))
        _, (v,) = make(x)
        assert np.abs(ad.log(ad.exp(v)).value - x).max() < 1e-12

    def test_matmul_hand_product(self):
        a = np.array([[1.0, 2, 3], [4, 5, 6]])
        b = np.array([[7.0, 8], [9, 10], [11, 12]])
        want = np.array([[1 * 7 + 2 * 9 + 3 * 11, 1 * 8 + 2 * 10 + 3 * 12],
                         [4 * 7 + 5 * 9 + 6 * 11, 4 * 8 + 5 * 10 + 6 * 12]])
        _, (va, vb) = make(a, b)
        assert np.array_equal((va @ vb).value, want)

    def test_matmul_shape_mismatch(self):
        _, (a, b) = make(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(ValueError):
            a @ b

    def test_log_domain_violation_reports_node(self):
        _, (x,) = make(np.array([1.0, -2.0]))
        with pytest.raises(ValueError, match="node"):
            ad.log(x)

    def test_rank_limit(self):
        tape = ad.Tape()
        with pytest.raises(ValueError):
            tape.var(np.zeros((2, 2, 2, 2)))


class TestBackward:
    def test_square(self):
        tape, (x,) = make(np.array(3.0))
        g = ad.backward(x * x)
        assert g.of(x) == pytest.approx(6.0)

    def test_sigmoid_network_matches_fd(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(4, 3))
        x = rng.normal(size=(3, 2))
        err = ad.grad_check(lambda vs: ad.sum(ad.sigmoid(vs[0] @ vs[1])), [w, x])
        assert err < 1e-6

    def test_unreachable_leaf_gets_zero(self):
        tape, (x, y) = make(np.array(2.0), np.array([1.0, 1.0]))
        g = ad.backward(x * x)
        assert np.array_equal(g.of(y), np.zeros(2))

    def test_non_scalar_root_rejected(self):
        _, (x,) = make(np.array([1.0, 2.0]))
        with pytest.raises(ValueError):
            ad.backward(x * x)

    def test_linearity_of_gradients(self):
        rng = np.random.default_rng(2)
        x0 = rng.normal(size=5)
        a, b = 1.7, -0.4

        def gf(fun):
            tape = ad.Tape()
            v = tape.var(x0, requires_grad=True)
            return ad.backward(fun(v)).of(v)

        f = lambda v: ad.sum(v * v)
        g = lambda v: ad.sum(ad.sigmoid(v))
        combined = gf(lambda v: a * f(v) + b * g(v))
        assert np.abs(combined - (a * gf(f) + b * gf(g))).max() < 1e-10

    def test_batch_sum_equals_sum_of_per_sample_grads(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(3, 3))
        xs = rng.normal(size=(4, 3))

        tape = ad.Tape()
        vw = tape.var(w, requires_grad=True)
        total = ad.sum(ad.sigmoid(tape.var(xs) @ vw))
        batch_grad = ad.backward(total).of(vw)

        acc = np.zeros_like(w)
        for i in range(4):
            t = ad.Tape()
            vwi = t.var(w, requires_grad=True)
            yi = ad.sum(ad.sigmoid(t.var(xs[i:i + 1]) @ vwi))
            acc += ad.backward(yi).of(vwi)
        assert np.abs(batch_grad - acc).max() < 1e-10

    def test_repeated_backward_is_bit_identical(self):
        rng = np.random.default_rng(4)
        tape, (x, w) = make(rng.normal(size=(5, 3)), rng.normal(size=(3, 3)))
        y = ad.sum(ad.softplus(x @ w) * ad.sigmoid(x @ w))
        g1 = ad.backward(y)
        g2 = ad.backward(y)
        assert np.array_equal(g1.of(w), g2.of(w))
        assert np.array_equal(g1.of(x), g2.of(x))


class TestOpGradients:
    """Each op against central finite differences."""

    CASES = {
        "div": lambda vs: ad.sum(vs[0] / (vs[1] * vs[1] + 1.0)),
        "relu": lambda vs: ad.sum(ad.relu(vs[0] - vs[1])),
        "softplus": lambda vs: ad.sum(ad.softplus(vs[0] * vs[1])),
        "sqrt": lambda vs: ad.sum(ad.sqrt(vs[0] * vs[0] + 1.0) * vs[1]),
        "sincos": lambda vs: ad.sum(ad.sin(vs[0]) * ad.cos(vs[1])),
        "atan2": lambda vs: ad.sum(ad.atan2(vs[0], vs[1] + 3.0)),
        "pow": lambda vs: ad.sum(ad.pow(vs[0] * vs[0] + 0.5, vs[1])),
        "minmax": lambda vs: ad.sum(ad.minimum(vs[0], vs[1]) + ad.maximum(vs[0], 2.0 * vs[1])),
        "cumsum": lambda vs: ad.sum(ad.cumsum(vs[0], axis=0) * vs[1]),
        "mean": lambda vs: ad.mean(vs[0] * vs[1]) + ad.sum(ad.mean(vs[0], axis=0) * ad.mean(vs[1], axis=0)),
    }

    @pytest.mark.parametrize("name", sorted(CASES))
    def test_fd(self, name):
        rng = np.random.default_rng(hash(name) % 2**31)
        a = rng.normal(size=(4, 3)) + 0.1
        b = rng.normal(size=(4, 3)) + 3.0
        assert ad.grad_check(self.CASES[name], [a, b]) < 1e-6

    def test_gather_scatter_adjoint_pair(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(6, 2))
        idx = np.array([0, 3, 3, 5])

        def f(vs):
            g = ad.gather(vs[0], idx)
            return ad.sum(g * g)

        assert ad.grad_check(f, [x]) < 1e-7

        def f2(vs):
            s = ad.scatter_add(vs[0], idx, size=6)
            return ad.sum(s * s)

        assert ad.grad_check(f2, [rng.normal(size=(4, 2))]) < 1e-7

    def test_where_and_broadcast(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(3, 4))
        cond = a > 0

        def f(vs):
            picked = ad.where(cond, vs[0] * 2.0, vs[0] * vs[0])
            return ad.sum(picked * ad.broadcast_to(vs[1], (3, 4)))

        assert ad.grad_check(f, [a, rng.normal(size=(1, 4))]) < 1e-7

    def test_concat_slice_stack(self):
        rng = np.random.default_rng(7)

        def f(vs):
            c = ad.concat([vs[0], vs[1]], axis=1)
            s = ad.slice_cols(c, 1, 4)
            cols = ad.stack_cols([ad.col(s, 0), ad.col(s, 2)])
            return ad.sum(cols * cols)

        assert ad.grad_check(f, [rng.normal(size=(3, 2)), rng.normal(size=(3, 3))]) < 1e-7

    def test_affine_matches_unfused(self):
        rng = np.random.default_rng(8)
        x, w, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)

        def fused(vs):
            return ad.sum(ad.sigmoid(ad.affine(vs[0], vs[1], vs[2])))

        def unfused(vs):
            return ad.sum(ad.sigmoid(vs[0] @ vs[1] + vs[2]))

        assert ad.grad_check(fused, [x, w, b]) < 1e-7
        tape = ad.Tape()
        va, vb2 = tape.var(x), tape.var(w)
        vb = tape.var(b)
        assert np.allclose(ad.affine(va, vb2, vb).value, x @ w + b)


class TestGradCheck:
    def test_quadratic_is_tiny(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=7)
        assert ad.grad_check(lambda vs: ad.sum(vs[0] * vs[0]), [x]) < 1e-9

    def test_nonfinite_reported(self):
        with pytest.raises(FloatingPointError):
            ad.grad_check(lambda vs: ad.sum(ad.exp(vs[0])), [np.array([1000.0])])

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from braingnn import autodiff as ad
from braingnn.autodiff import ShapeError, Tensor, finite_difference_check


def _grad_of(fn, x_data):
    x = Tensor(np.asarray(x_data, dtype=float), requires_grad=True)
    out = fn(x)
    out.backward()
    return x.grad


def _fd_grad(fn, x_data, h=1e-6):
    x_data = np.asarray(x_data, dtype=float)
    g = np.zeros_like(x_data)
    flat = x_data.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(Tensor(x_data)).data)
        flat[i] = orig - h
        fm = float(fn(Tensor(x_data)).data)
        flat[i] = orig
        g.ravel()[i] = (fp - fm) / (2 * h)
    return g


def _check(fn, x_data, tol=1e-6):
    g_ad = _grad_of(fn, x_data)
    g_fd = _fd_grad(fn, x_data)
    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    assert (np.abs(g_ad - g_fd) / denom).max() < tol


class TestPrimitiveValues:
    def test_tanh_zero(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        out = ad.reduce_sum(ad.tanh(x))
        assert float(out.data) == 0.0
        out.backward()
        assert x.grad[0] == pytest.approx(1.0)

    def test_softmax_symmetry(self):
        out = ad.softmax(Tensor(np.array([[0.0, 0.0]])))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_reduce_max_tie_routes_to_first(self):
        x = Tensor(np.array([3.0, 1.0, 3.0]), requires_grad=True)
        ad.reduce_max(x).backward()
        np.testing.assert_array_equal(x.grad, [1.0, 0.0, 0.0])

    def test_shape_mismatch_reports_shapes(self):
        with pytest.raises(ShapeError) as exc:
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        assert "(2, 3)" in str(exc.value)

    def test_non_scalar_backward_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(3), requires_grad=True).backward()


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self):
        g = _grad_of(lambda x: ad.reduce_sum(x), np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(g, np.ones((2, 3)))

    def test_square_gradient_is_2x(self):
        data = np.array([1.0, -2.0, 3.0])
        g = _grad_of(lambda x: ad.reduce_sum(ad.mul(x, x)), data)
        np.testing.assert_allclose(g, 2 * data)

    def test_reuse_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = ad.add(ad.mul(x, x), x)  # x^2 + x -> grad 2x + 1
        ad.reduce_sum(y).backward()
        assert x.grad[0] == pytest.approx(5.0)

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(0)
        data = rng.normal(size=5)
        gf = _grad_of(lambda x: ad.reduce_sum(ad.mul(x, x)), data)
        gg = _grad_of(lambda x: ad.reduce_sum(ad.tanh(x)), data)
        combo = _grad_of(
            lambda x: ad.add(ad.scale(ad.reduce_sum(ad.mul(x, x)), 2.0),
                             ad.scale(ad.reduce_sum(ad.tanh(x)), -3.0)),
            data)
        np.testing.assert_allclose(combo, 2 * gf - 3 * gg, atol=1e-12)


class TestPrimitiveGradients:
    """Every primitive against central finite differences, away from kinks."""

    def test_matmul(self):
        rng = np.random.default_rng(0)
        B = Tensor(rng.normal(size=(4, 2)))
        _check(lambda x: ad.reduce_sum(ad.tanh(ad.matmul(x, B))),
               rng.normal(size=(3, 4)))

    def test_elementwise_ops(self):
        rng = np.random.default_rng(1)
        y = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)))
        for op in (ad.add, ad.sub, ad.mul, ad.div):
            _check(lambda x, op=op: ad.reduce_sum(ad.exp(ad.scale(op(x, y), 0.3))),
                   rng.uniform(0.5, 2.0, size=(3, 4)))

    def test_row_broadcast(self):
        rng = np.random.default_rng(2)
        v = Tensor(rng.normal(size=4))
        _check(lambda x: ad.reduce_sum(ad.tanh(ad.add(x, v))),
               rng.normal(size=(3, 4)))
        _check(lambda x: ad.reduce_sum(ad.tanh(ad.mul(x, v))),
               rng.normal(size=(3, 4)))

    def test_unary_ops(self):
        rng = np.random.default_rng(3)
        _check(lambda x: ad.reduce_sum(ad.tanh(x)), rng.normal(size=5))
        _check(lambda x: ad.reduce_sum(ad.exp(x)), rng.normal(size=5))
        _check(lambda x: ad.reduce_sum(ad.log(x)), rng.uniform(0.5, 3, size=5))
        _check(lambda x: ad.reduce_sum(ad.relu(x)),
               rng.normal(size=7) + np.where(rng.normal(size=7) > 0, 0.5, -0.5))

    def test_softmax_grad(self):
        rng = np.random.default_rng(4)
        w = Tensor(rng.normal(size=(2, 3)))
        _check(lambda x: ad.reduce_sum(ad.mul(ad.softmax(x), w)),
               rng.normal(size=(2, 3)))

    def test_norm_concat_gather(self):
        rng = np.random.default_rng(5)
        _check(lambda x: ad.norm(x), rng.normal(size=(3, 2)) + 1.0)
        other = Tensor(rng.normal(size=(2, 2)))
        _check(lambda x: ad.norm(ad.concat([x, other], axis=0)),
               rng.normal(size=(3, 2)))
        _check(lambda x: ad.reduce_sum(
            ad.tanh(ad.gather_rows(x, np.array([0, 2, 2])))),
            rng.normal(size=(4, 3)))

    def test_gather_pairs_scatter_add(self):
        rng = np.random.default_rng(6)
        _check(lambda x: ad.reduce_sum(
            ad.tanh(ad.gather_pairs(x, np.array([0, 1]), np.array([2, 0])))),
            rng.normal(size=(3, 3)))
        idx = np.array([0, 1, 1, 2])
        _check(lambda x: ad.reduce_sum(ad.tanh(ad.scatter_add(x, idx, 3))),
               rng.normal(size=(4, 2)))

    def test_edge_matvec(self):
        rng = np.random.default_rng(7)
        vecs = Tensor(rng.normal(size=(4, 3)))
        _check(lambda x: ad.reduce_sum(ad.tanh(ad.edge_matvec(x, vecs))),
               rng.normal(size=(4, 2, 3)))

    def test_reductions(self):
        rng = np.random.default_rng(8)
        _check(lambda x: ad.reduce_sum(ad.tanh(ad.reduce_mean(x, axis=0))),
               rng.normal(size=(4, 3)))
        _check(lambda x: ad.reduce_sum(ad.tanh(ad.reduce_max(x, axis=0))),
               rng.normal(size=(4, 3)))

    def test_segment_ops(self):
        rng = np.random.default_rng(9)
        seg = np.array([0, 0, 1, 1, 1, 2])
        _check(lambda x: ad.reduce_sum(ad.tanh(ad.segment_mean(x, seg, 3))),
               rng.normal(size=(6, 2)))
        _check(lambda x: ad.reduce_sum(ad.tanh(ad.segment_max(x, seg, 3))),
               rng.normal(size=(6, 2)))


class TestFiniteDifferenceHarness:
    def test_square_at_three(self):
        rep = finite_difference_check(
            lambda x: ad.reduce_sum(ad.mul(x, x)), Tensor(np.array([3.0]),
                                                          requires_grad=True))
        assert rep["grad_ad"][0] == pytest.approx(6.0)
        assert rep["max_rel_error"] < 1e-8

    def test_relu_kink_flagged_and_excluded(self):
        x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
        rep = finite_difference_check(lambda t: ad.reduce_sum(ad.relu(t)), x)
        assert rep["kink_mask"][0]
        assert not rep["kink_mask"][1]
        assert rep["max_rel_error"] < 1e-8


class TestDeterminism:
    def test_replay_bit_identical(self):
        rng = np.random.default_rng(10)
        data = rng.normal(size=(5, 4))
        w = rng.normal(size=(4, 2))

        def run():
            x = Tensor(data.copy(), requires_grad=True)
            out = ad.reduce_sum(ad.softmax(ad.matmul(ad.tanh(x), Tensor(w))))
            out.backward()
            return out.data.copy(), x.grad.copy()

        v1, g1 = run()
        v2, g2 = run()
        assert np.array_equal(v1, v2) and np.array_equal(g1, g2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_property_grad_matches_fd_on_random_composites(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(3, 2)))
    # smooth composite away from kinks
    _check(lambda x: ad.norm(ad.tanh(ad.matmul(ad.exp(ad.scale(x, 0.3)), w))),
           rng.normal(size=(2, 3)))

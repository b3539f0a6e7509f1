"""Tensor engine: forward semantics, backward correctness, gradcheck behavior."""

import numpy as np
import pytest

from attrcenter import autodiff as ad
from attrcenter.autodiff import DiffTensor, NonFiniteError, ShapeError, Tape, TapeError


def t64(x, **kw):
    return DiffTensor(x, dtype=np.float64, **kw)


class TestForwardPrimitives:
    def test_relu_definition(self):
        out = ad.relu(t64([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_matmul_identity(self):
        a = np.random.default_rng(0).normal(size=(3, 5))
        out = ad.matmul(t64(np.eye(3)), t64(a))
        np.testing.assert_allclose(out.data, a, rtol=0, atol=0)

    def test_sq_l2_norm_345(self):
        assert ad.sq_l2_norm(t64([3.0, 4.0])).item() == 25.0

    def test_matmul_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))

    def test_non_finite_rejected_at_construction(self):
        with pytest.raises(NonFiniteError):
            DiffTensor([1.0, np.inf])

    def test_non_finite_rejected_in_op(self):
        big = DiffTensor(np.full((4,), 3e38, dtype=np.float32))
        with pytest.raises(NonFiniteError, match="add"):
            ad.add(big, big)

    def test_division_by_zero_is_caught(self):
        with pytest.raises(NonFiniteError):
            ad.div(t64([1.0]), t64([0.0]))

    def test_dtype_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="dtype"):
            ad.add(DiffTensor([1.0], dtype=np.float32), t64([1.0]))

    def test_gather_out_of_range(self):
        with pytest.raises(ShapeError, match="out of range"):
            ad.gather(t64(np.ones((3, 2))), np.array([3]))

    def test_softmax_cross_entropy_uniform_logits(self):
        m, k = 3, 5
        loss = ad.softmax_cross_entropy(t64(np.zeros((m, k))), np.arange(3))
        np.testing.assert_allclose(loss.item(), m * np.log(k), rtol=1e-12)

    def test_softmax_label_out_of_range(self):
        with pytest.raises(ShapeError, match="label"):
            ad.softmax_cross_entropy(t64(np.zeros((2, 3))), np.array([0, 3]))

    def test_avg_pool_constant(self):
        x = t64(np.full((1, 1, 4, 4), 7.0))
        out = ad.avg_pool2d(x, 2)
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_allclose(out.data, 7.0)

    def test_max_pool_picks_max(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        out = ad.max_pool2d(t64(x), 2)
        np.testing.assert_array_equal(out.data[0, 0], [[5, 7], [13, 15]])

    def test_global_avg_pool(self):
        x = np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2)
        out = ad.global_avg_pool(t64(x))
        np.testing.assert_allclose(out.data, [[1.5, 5.5]])

    def test_conv2d_known_value(self):
        # 1x1 kernel of weight 2 doubles the image
        x = np.random.default_rng(1).normal(size=(1, 1, 3, 3))
        w = np.full((1, 1, 1, 1), 2.0)
        out = ad.conv2d(t64(x), t64(w))
        np.testing.assert_allclose(out.data, 2 * x, rtol=1e-12)


class TestBackward:
    def test_sq_norm_gradient(self):
        with Tape():
            x = t64([1.0, 2.0], requires_grad=True)
            ad.backward(ad.sq_l2_norm(x))
        np.testing.assert_allclose(x.grad, [2.0, 4.0], rtol=0)

    def test_constant_loss_zero_gradient(self):
        with Tape():
            x = t64([1.0, -3.0, 2.0], requires_grad=True)
            loss = ad.tensor_sum(x) * 0.0
            ad.backward(loss)
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 0.0])

    def test_backward_non_scalar_rejected(self):
        with Tape():
            x = t64([1.0, 2.0], requires_grad=True)
            y = ad.mul(x, 2.0)
            with pytest.raises(ShapeError, match="scalar"):
                ad.backward(y)

    def test_backward_without_tape_rejected(self):
        x = t64([1.0], requires_grad=True)
        with pytest.raises(TapeError):
            ad.backward(ad.sq_l2_norm(x))

    def test_grad_absent_without_requires_grad(self):
        with Tape():
            x = t64([1.0, 2.0])
            y = t64([3.0, 1.0], requires_grad=True)
            ad.backward(ad.sq_l2_norm(ad.add(x, y)))
        assert x.grad is None
        assert y.grad is not None

    def test_gradient_accumulates_over_reuse(self):
        with Tape():
            x = t64([1.0], requires_grad=True)
            ad.backward(ad.tensor_sum(ad.add(x, x)))
        np.testing.assert_allclose(x.grad, [2.0])

    def test_composite_matches_finite_differences(self):
        # random composite touching most primitives, checked against the
        # independent central-difference oracle inside gradcheck
        rng = np.random.default_rng(7)
        w = t64(rng.normal(size=(8, 8)))
        b = t64(rng.normal(size=(8,)))

        def fn(x):
            h = ad.matmul(ad.reshape(x, (1, 8)), w)
            h = ad.add(h, b)
            h = ad.relu(h)
            h = ad.div(h, ad.add(ad.sq_l2_norm(x), 1.0))
            return ad.add(ad.sq_l2_norm(h), ad.tensor_sum(ad.mul(x, x)))

        report = ad.gradcheck(fn, t64(rng.normal(size=(8,))), step=1e-4, tol=1e-4)
        assert report.passed, report.summary()

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(6,))
        alpha, beta = 1.7, -0.6

        def grad_of(fn):
            with Tape():
                x = t64(x0, requires_grad=True)
                ad.backward(fn(x))
            return x.grad.copy()

        f = lambda x: ad.sq_l2_norm(x)
        g = lambda x: ad.tensor_sum(ad.relu(x))
        combined = grad_of(lambda x: ad.add(alpha * f(x), beta * g(x)))
        np.testing.assert_allclose(combined, alpha * grad_of(f) + beta * grad_of(g), rtol=1e-10)

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(42)
            with Tape():
                x = t64(rng.normal(size=(4, 4)), requires_grad=True)
                w = t64(rng.normal(size=(4, 4)), requires_grad=True)
                loss = ad.sq_l2_norm(ad.relu(ad.matmul(x, w)))
                ad.backward(loss)
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        a, b = run(), run()
        for u, v in zip(a, b):
            assert np.array_equal(u, v)


def _primitive_cases():
    rng = np.random.default_rng(11)
    w = rng.normal(size=(3, 2, 3, 3))
    cases = {
        "add": lambda x: ad.tensor_sum(ad.add(x, x * 0.5)),
        "sub": lambda x: ad.sq_l2_norm(ad.sub(x, 2.0 * x)),
        "scalar_mul": lambda x: ad.tensor_sum(x * 3.25),
        "mul": lambda x: ad.tensor_sum(ad.mul(x, x)),
        "div": lambda x: ad.tensor_sum(ad.div(x, ad.add(ad.mul(x, x), 1.0))),
        "matmul": lambda x: ad.sq_l2_norm(ad.matmul(ad.reshape(x, (4, 4)), ad.reshape(x, (4, 4)))),
        "relu": lambda x: ad.tensor_sum(ad.relu(x)),
        "maximum_const": lambda x: ad.tensor_sum(ad.maximum_const(x, 0.25)),
        "sum_axis": lambda x: ad.sq_l2_norm(ad.tensor_sum(ad.reshape(x, (4, 4)), axis=1)),
        "sq_l2_norm": lambda x: ad.sq_l2_norm(x),
        "rowwise_sq_norm": lambda x: ad.tensor_sum(ad.rowwise_sq_norm(ad.reshape(x, (4, 4)))),
        "sqrt": lambda x: ad.tensor_sum(ad.sqrt(ad.add(ad.mul(x, x), 0.5))),
        "gather": lambda x: ad.sq_l2_norm(ad.gather(ad.reshape(x, (8, 2)), np.array([0, 3, 3, 7]))),
        "transpose": lambda x: ad.sq_l2_norm(ad.matmul(ad.reshape(x, (2, 8)), ad.transpose(ad.reshape(x, (2, 8))))),
        "conv2d": lambda x: ad.sq_l2_norm(ad.conv2d(ad.reshape(x, (1, 2, 4, 2)), t64(w), stride=1, padding=1)),
        "avg_pool2d": lambda x: ad.sq_l2_norm(ad.avg_pool2d(ad.reshape(x, (1, 1, 4, 4)), 2)),
        "max_pool2d": lambda x: ad.sq_l2_norm(ad.max_pool2d(ad.reshape(x, (1, 1, 4, 4)), 2)),
        "global_avg_pool": lambda x: ad.sq_l2_norm(ad.global_avg_pool(ad.reshape(x, (1, 4, 2, 2)))),
        "softmax_cross_entropy": lambda x: ad.softmax_cross_entropy(ad.reshape(x, (4, 4)), np.array([0, 1, 2, 3])),
        "channel_affine": lambda x: ad.sq_l2_norm(
            ad.channel_affine(ad.reshape(x, (1, 2, 4, 2)), t64([1.3, 0.7]), t64([0.2, -0.1]))),
        "batch_norm": lambda x: ad.sq_l2_norm(
            ad.batch_norm(ad.reshape(x, (2, 2, 2, 2)), t64([1.1, 0.9]), t64([0.1, -0.2]))),
    }
    return cases.items()


@pytest.mark.parametrize("name,fn", _primitive_cases())
def test_primitive_finite_difference_agreement(name, fn):
    # 100 random points per primitive, away from kinks, max rel err < 1e-4
    rng = np.random.default_rng(hash(name) % 2**32)
    worst = 0.0
    for _ in range(100):
        point = t64(rng.normal(size=(16,)) + 0.05)
        report = ad.gradcheck(fn, point, step=1e-4, tol=1e-4)
        worst = max(worst, report.max_rel_err)
    assert worst < 1e-4, f"{name}: max rel err {worst:.2e}"


class TestGradcheck:
    def test_quadratic_passes(self):
        report = ad.gradcheck(ad.sq_l2_norm, t64([1.0, 0.0]), step=1e-4, tol=1e-4)
        assert report.passed

    def test_relu_kink_flagged_and_excluded(self):
        report = ad.gradcheck(lambda x: ad.tensor_sum(ad.relu(x)), t64([0.0, 1.0, -1.0]))
        assert report.excluded.tolist() == [True, False, False]
        assert report.passed

    def test_non_scalar_fn_rejected(self):
        with pytest.raises(ShapeError, match="scalar"):
            ad.gradcheck(lambda x: ad.mul(x, 2.0), t64([1.0, 2.0]))

    def test_report_lists_per_coordinate_values(self):
        report = ad.gradcheck(ad.sq_l2_norm, t64([1.0, -2.0, 3.0]))
        assert report.analytic.shape == (3,)
        assert report.numeric.shape == (3,)
        np.testing.assert_allclose(report.analytic, [2.0, -4.0, 6.0], rtol=1e-12)
        assert "pass" in report.summary()


class TestTape:
    def test_tape_reset_clears_nodes(self):
        with Tape() as tape:
            x = t64([1.0], requires_grad=True)
            ad.mul(x, 2.0)
            assert len(tape) == 1
            tape.reset()
            assert len(tape) == 0

    def test_ops_outside_tape_do_not_track(self):
        x = t64([1.0], requires_grad=True)
        y = ad.mul(x, 2.0)
        assert y.tape is None and not y.requires_grad

    def test_detach_cuts_gradient_flow(self):
        with Tape():
            x = t64([1.0, 2.0], requires_grad=True)
            frozen = ad.mul(x, 3.0).detach()
            loss = ad.add(ad.sq_l2_norm(x), ad.sq_l2_norm(frozen))
            ad.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0])  # only the live branch

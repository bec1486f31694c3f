"""Tests for the reverse-mode autodiff core."""
import math

import numpy as np
import pytest

from natlab.errors import ShapeError
from natlab.services import autodiff as ad
from natlab.services.autodiff import GradTape, TensorNode


def leaf(value):
    return TensorNode(np.asarray(value, dtype=np.float64), requires_grad=True)


def grads_of(f, *nodes):
    with GradTape() as tape:
        loss = f()
    tape.backward(loss)
    return [n.grad for n in nodes]


class TestTape:
    def test_square_gradient(self):
        x = leaf([1.0, -2.0, 3.0])
        (g,) = grads_of(lambda: ad.sum(ad.mul(x, x)), x)
        np.testing.assert_allclose(g, [2.0, -4.0, 6.0])

    def test_broadcast_add_sums_back(self):
        x = leaf(np.ones((3, 4)))
        b = leaf(np.zeros(4))
        gx, gb = grads_of(lambda: ad.sum(ad.add(x, b)), x, b)
        np.testing.assert_allclose(gx, np.ones((3, 4)))
        np.testing.assert_allclose(gb, np.full(4, 3.0))

    def test_backward_twice_raises(self):
        x = leaf([1.0])
        with GradTape() as tape:
            loss = ad.sum(ad.mul(x, x))
        tape.backward(loss)
        with pytest.raises(RuntimeError):
            tape.backward(loss)

    def test_non_scalar_loss_raises(self):
        x = leaf([1.0, 2.0])
        with GradTape() as tape:
            y = ad.mul(x, x)
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_nothing_recorded_without_tape(self):
        x = leaf([1.0, 2.0])
        y = ad.mul(x, x)
        assert not y.requires_grad
        assert y.parents == ()

    def test_constants_are_not_recorded(self):
        with GradTape() as tape:
            ad.mul(ad.constant([1.0, 2.0]), ad.constant([3.0, 4.0]))
        assert len(tape) == 0

    def test_stop_gradient_blocks_flow(self):
        x = leaf([2.0])
        (g,) = grads_of(lambda: ad.sum(ad.mul(x, ad.stop_gradient(x))), x)
        np.testing.assert_allclose(g, [2.0])

    def test_interior_grads_released(self):
        x = leaf([1.0, 2.0])
        with GradTape() as tape:
            y = ad.mul(x, x)
            loss = ad.sum(y)
        tape.backward(loss)
        assert y.grad is None
        assert x.grad is not None


class TestOps:
    def test_embed_lookup_accumulates_repeated_ids(self):
        table = leaf(np.ones((4, 3)))
        ids = np.array([[1, 1, 2]])
        (g,) = grads_of(lambda: ad.sum(ad.embed_lookup(table, ids)), table)
        np.testing.assert_allclose(g[:, 0], [0.0, 2.0, 1.0, 0.0])

    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError) as info:
            ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((4, 5))))
        assert "(2, 3)" in str(info.value) and "(4, 5)" in str(info.value)

    def test_add_shape_error(self):
        with pytest.raises(ShapeError):
            ad.add(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((4,))))

    def test_log_softmax_normalizes(self, rng):
        x = ad.constant(rng.standard_normal((5, 7)) * 30, np.float64)
        out = ad.log_softmax(x).value
        np.testing.assert_allclose(np.exp(out).sum(axis=-1), 1.0, atol=1e-12)

    def test_dropout_identity_when_disabled(self, rng):
        x = ad.constant(rng.standard_normal((3, 4)))
        assert ad.dropout(x, 0.0, rng) is x
        assert ad.dropout(x, 0.5, None) is x

    def test_dropout_replays_with_same_seed(self):
        x = ad.constant(np.ones((50, 20)))
        a = ad.dropout(x, 0.3, np.random.default_rng(7)).value
        b = ad.dropout(x, 0.3, np.random.default_rng(7)).value
        np.testing.assert_array_equal(a, b)
        assert a.dtype == x.dtype
        kept = np.isclose(a, np.asarray(1 / 0.7, dtype=a.dtype))
        assert np.all(kept | (a == 0))
        assert 0 < kept.mean() < 1

    @pytest.mark.parametrize("logits", [[1000.0, 0.0], [1.0, 2.0, 3.0], [-1000.0, 0.0, 1000.0]])
    def test_log_softmax_matches_exact_reference(self, logits):
        with ad.precision("float64"):
            got = ad.log_softmax(ad.constant(logits)).value
        top = max(logits)
        log_z = top + math.log(math.fsum(math.exp(v - top) for v in logits))
        np.testing.assert_allclose(got, [v - log_z for v in logits], rtol=1e-12, atol=1e-12)
        assert np.all(np.isfinite(got))

    def test_precision_context_restores(self):
        before = ad.default_dtype()
        with ad.precision("float64"):
            assert ad.constant(1.0).dtype == np.float64
        assert ad.default_dtype() == before

    def test_unsupported_precision(self):
        with pytest.raises(ValueError):
            ad.set_default_dtype("float16")


class TestGradCheck:
    @pytest.mark.parametrize("op", ["log_softmax", "softmax", "layer_norm", "matmul", "take_along", "transpose"])
    def test_ops_pass(self, op, rng):
        with ad.precision("float64"):
            x = leaf(rng.standard_normal((2, 3, 4)))
            w = leaf(rng.standard_normal((4, 5)))
            gain = leaf(1.0 + 0.1 * rng.standard_normal(4))
            bias = leaf(rng.standard_normal(4))
            weights = ad.constant(rng.standard_normal((2, 3, 4)))
            indices = rng.integers(0, 4, size=(2, 3, 2))

            functions = {
                "log_softmax": lambda: ad.sum(ad.mul(ad.log_softmax(x), weights)),
                "softmax": lambda: ad.sum(ad.mul(ad.softmax(x), weights)),
                "layer_norm": lambda: ad.sum(ad.mul(ad.layer_norm(x, gain, bias), weights)),
                "matmul": lambda: ad.sum(ad.mul(ad.matmul(x, w), ad.matmul(x, w))),
                "take_along": lambda: ad.sum(ad.exp(ad.take_along(x, indices))),
                "transpose": lambda: ad.sum(ad.mul(ad.transpose(x, (2, 0, 1)), ad.transpose(weights, (2, 0, 1)))),
            }
            params = {"x": x, "w": w, "gain": gain, "bias": bias}
            report = ad.grad_check(functions[op], params, tolerance=1e-6)
        assert report.passed, report.failures[:3]

    def test_detects_wrong_gradient(self):
        x = leaf([1.0, 2.0, 3.0])

        def wrong_square():
            # derivative of x^2 deliberately given as x
            return ad.sum(ad._make(x.value ** 2, (x,), lambda g: (g * x.value,)))

        report = ad.grad_check(wrong_square, {"x": x})
        assert not report.passed
        assert report.max_rel_error == pytest.approx(0.5, rel=1e-4)
        assert {f.index for f in report.failures} == {0, 1, 2}

    def test_max_coords_limits_work(self, rng):
        x = leaf(rng.standard_normal(100))
        report = ad.grad_check(lambda: ad.sum(ad.mul(x, x)), [x], max_coords=10)
        assert report.coordinates == 10
        assert report.passed

    def test_relu_kink_is_stepped_around(self):
        x = leaf([1e-6, -2e-6, 0.5])
        w = ad.constant([2.0, 3.0, -1.0])
        report = ad.grad_check(lambda: ad.sum(ad.mul(ad.relu(x), w)), {"x": x})
        assert report.passed, report.failures
        assert report.coordinates == 3 and report.skipped == 0

    def test_input_exactly_on_kink_is_skipped(self):
        x = leaf([0.0, 1.0])
        report = ad.grad_check(lambda: ad.sum(ad.relu(x)), {"x": x})
        assert report.passed
        assert report.skipped == 1 and report.coordinates == 1

    def test_relu_network_passes_for_many_seeds(self):
        failing = []
        with ad.precision("float64"):
            for seed in range(100):
                rng = np.random.default_rng(seed)
                x = leaf(rng.standard_normal((4, 6)))
                w1 = leaf(rng.standard_normal((6, 8)))
                w2 = leaf(rng.standard_normal((8, 3)))
                target = ad.constant(rng.standard_normal((4, 3)))

                def f():
                    hidden = ad.relu(ad.matmul(x, w1))
                    return ad.sum(ad.mul(ad.log_softmax(ad.matmul(hidden, w2)), target))

                report = ad.grad_check(f, {"x": x, "w1": w1, "w2": w2}, max_coords=6, seed=seed)
                if not report.passed:
                    failing.append((seed, report.max_rel_error))
        assert failing == []

    def test_relu_signs_recorded_only_inside_block(self):
        x = ad.constant([-1.0, 2.0])
        ad.relu(x)
        with ad.record_relu_signs() as signs:
            ad.relu(x)
        ad.relu(x)
        assert len(signs) == 1
        np.testing.assert_array_equal(signs[0], [False, True])

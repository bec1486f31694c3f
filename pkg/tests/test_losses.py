"""Tests for the objective terms."""
import numpy as np
import pytest

from natlab.errors import CorpusError
from natlab.models.config import LossConfig
from natlab.models.metrics import LossBreakdown
from natlab.services import autodiff as ad
from natlab.services import losses, transformer
from natlab.services.diagnostics import check_objective_gradients
from natlab.services.masking import make_view, pair_views


def log_dist(rng, shape):
    return ad.log_softmax(ad.constant(rng.standard_normal(shape) * 2.0, np.float64)).value


def numpy_bikl(logp, logq):
    p, q = np.exp(logp), np.exp(logq)
    return 0.5 * (np.sum(p * (logp - logq), axis=-1) + np.sum(q * (logq - logp), axis=-1))


def four_forwards(online, average, batch, dropout=0.0, seed=0):
    src = batch.source_array()
    in1, in2 = batch.input_arrays()
    rngs = [np.random.default_rng([seed, i]) if dropout else None for i in range(4)]
    return (
        transformer.forward(online, src, in1, dropout, rngs[0]),
        transformer.forward(online, src, in2, dropout, rngs[1]),
        transformer.forward(average, src, in1, dropout, rngs[2]),
        transformer.forward(average, src, in2, dropout, rngs[3]),
    )


@pytest.fixture
def dual_batch():
    views = [
        (make_view([6, 7, 8, 9], [0, 1, 2]), make_view([6, 7, 8, 9], [1, 2, 3])),
        (make_view([10, 11], [0]), make_view([10, 11], [1])),
    ]
    return pair_views([a for a, _ in views], [b for _, b in views], [[2, 6, 7], [2, 8]])


class TestBikl:
    def test_kl_identities(self):
        rng = np.random.default_rng(0)
        logp, logq = log_dist(rng, (1000, 10)), log_dist(rng, (1000, 10))
        forward = losses.bikl(logp, logq).value
        backward = losses.bikl(logq, logp).value
        same = losses.bikl(logp, logp).value
        assert forward.min() >= -1e-7
        assert np.abs(same).max() <= 1e-9
        np.testing.assert_allclose(forward, backward, atol=1e-9)
        np.testing.assert_allclose(forward, numpy_bikl(logp, logq), atol=1e-9)

    def test_shape_mismatch(self, rng):
        from natlab.errors import ShapeError
        with pytest.raises(ShapeError):
            losses.bikl(log_dist(rng, (2, 3)), log_dist(rng, (2, 4)))


class TestNll:
    def test_label_smoothing_formula(self, rng):
        logp = log_dist(rng, (1, 4, 6))
        view = make_view([3, 4, 5, 3], [1, 3])
        eps = 0.1
        expected = sum(
            (1 - eps) * -logp[0, pos, tok] + eps * -logp[0, pos].mean()
            for pos, tok in ((1, 4), (3, 3))
        )
        got = losses.nll_masked(ad.constant(logp, np.float64), [view], eps).value
        assert float(got) == pytest.approx(expected, rel=1e-12)

    def test_single_view_accepts_2d(self, rng):
        logp = log_dist(rng, (3, 6))
        view = make_view([3, 4, 5], [0])
        got = losses.nll_masked(ad.constant(logp, np.float64), view).value
        assert float(got) == pytest.approx(-logp[0, 3])


class TestMeanBikl:
    def test_empty_sentence_counts_in_batch(self, rng):
        logp, logq = log_dist(rng, (2, 3, 5)), log_dist(rng, (2, 3, 5))
        positions = [[0, 2], []]
        got = float(losses.mean_bikl_over_positions(ad.constant(logp, np.float64), ad.constant(logq, np.float64), positions).value)
        per = numpy_bikl(logp[0, [0, 2]], logq[0, [0, 2]]).mean()
        assert got == pytest.approx(per / 2, rel=1e-12)

    def test_all_empty_is_zero(self, rng):
        logp = ad.constant(log_dist(rng, (2, 3, 5)), np.float64)
        assert float(losses.mean_bikl_over_positions(logp, logp, [[], []]).value) == 0.0


class TestConsistencyTerms:
    @staticmethod
    def loop_mean(logp, logq, positions):
        per_sentence = [
            np.mean([numpy_bikl(logp[b, i], logq[b, i]) for i in sentence]) if sentence else 0.0
            for b, sentence in enumerate(positions)
        ]
        return float(np.mean(per_sentence))

    def test_match_position_loop(self, rng):
        on1, on2, av1, av2 = (log_dist(rng, (3, 5, 7)) for _ in range(4))
        batch = pair_views(
            [make_view([6, 7, 8, 9, 10], [0, 1, 3]), make_view([6, 7], [0]), make_view([8, 9, 10], [0, 1, 2])],
            [make_view([6, 7, 8, 9, 10], [1, 3, 4]), make_view([6, 7], [1]), make_view([8, 9, 10], [2])],
        )
        nodes = [ad.constant(x, np.float64) for x in (on1, on2, av1, av2)]
        mkl1, mkl2 = losses.model_consistency(*nodes, batch)
        skl1, skl2, skl3 = losses.shared_mask_consistency(*nodes, batch)

        masked1 = [v.masked_positions for v in batch.view1]
        masked2 = [v.masked_positions for v in batch.view2]
        shared = batch.shared_positions
        assert shared == [[1, 3], [], [2]]
        assert float(mkl1.value) == pytest.approx(self.loop_mean(on1, av1, masked1), rel=1e-12)
        assert float(mkl2.value) == pytest.approx(self.loop_mean(on2, av2, masked2), rel=1e-12)
        assert float(skl1.value) == pytest.approx(self.loop_mean(on1, on2, shared), rel=1e-12)
        assert float(skl2.value) == pytest.approx(self.loop_mean(on1, av2, shared), rel=1e-12)
        assert float(skl3.value) == pytest.approx(self.loop_mean(av1, on2, shared), rel=1e-12)

    def test_single_shared_position(self, rng):
        on1, on2, av1, av2 = (log_dist(rng, (1, 4, 6)) for _ in range(4))
        batch = pair_views([make_view([6, 7, 8, 9], [0, 2])], [make_view([6, 7, 8, 9], [2, 3])])
        nodes = [ad.constant(x, np.float64) for x in (on1, on2, av1, av2)]
        skl = [float(t.value) for t in losses.shared_mask_consistency(*nodes, batch)]
        expected = [numpy_bikl(p[0, 2], q[0, 2]) for p, q in ((on1, on2), (on1, av2), (av1, on2))]
        np.testing.assert_allclose(skl, expected, rtol=1e-12)

    def test_model_consistency_positive_with_dropout(self, tiny_params64, dual_batch):
        average = tiny_params64.copy(requires_grad=False)
        terms = losses.compute_terms(*four_forwards(tiny_params64, average, dual_batch, dropout=0.3, seed=3), dual_batch, LossConfig())
        assert float(terms.mkl1.value) > 0.0
        assert float(terms.mkl2.value) > 0.0
        assert float(terms.skl1.value) > 0.0


class TestBatchOrder:
    VIEWS = [
        (make_view([6, 7, 8, 9], [0, 1, 2]), make_view([6, 7, 8, 9], [1, 2, 3])),
        (make_view([10, 11], [0]), make_view([10, 11], [1])),
        (make_view([12, 6, 7], [1]), make_view([12, 6, 7], [1, 2])),
    ]
    SOURCES = [[2, 6, 7], [2, 8], [2, 9, 10, 11]]

    def batch(self, order):
        return pair_views(
            [self.VIEWS[i][0] for i in order], [self.VIEWS[i][1] for i in order], [self.SOURCES[i] for i in order],
        )

    @pytest.mark.parametrize("reduction", ["sum", "mean"])
    def test_breakdown_ignores_sentence_order(self, tiny_params64, reduction):
        average = tiny_params64.copy(requires_grad=False)
        for _, node in average.items():
            node.value += 0.01
        config = LossConfig(lambda_=0.5, batch_reduction=reduction)
        breakdowns = []
        for order in ([0, 1, 2], [2, 0, 1], [1, 2, 0]):
            batch = self.batch(order)
            terms = losses.compute_terms(*four_forwards(tiny_params64, average, batch), batch, config)
            breakdowns.append(losses.total_loss(terms, config).model_dump())
        for other in breakdowns[1:]:
            for name, value in breakdowns[0].items():
                assert other[name] == pytest.approx(value, rel=1e-9, abs=1e-12), name


class TestComputeTerms:
    def test_identical_models_have_zero_consistency(self, tiny_params64):
        view = make_view([6, 7, 8], [0, 2])
        batch = pair_views([view], [view], [[2, 6, 7, 8]])
        average = tiny_params64.copy(requires_grad=False)
        terms = losses.compute_terms(*four_forwards(tiny_params64, average, batch), batch, LossConfig())
        for name in losses.KL_TERMS:
            assert abs(float(getattr(terms, name).value)) <= 1e-9, name

    def test_empty_shared_set_gives_zero_skl(self, tiny_params64):
        batch = pair_views([make_view([6, 7], [0])], [make_view([6, 7], [1])], [[2, 9]])
        average = tiny_params64.copy(requires_grad=False)
        terms = losses.compute_terms(*four_forwards(tiny_params64, average, batch), batch, LossConfig())
        assert (float(terms.skl1.value), float(terms.skl2.value), float(terms.skl3.value)) == (0.0, 0.0, 0.0)

    def test_average_model_gets_no_gradient(self, tiny_params, dual_batch):
        average = tiny_params.copy(requires_grad=False)
        config = LossConfig()
        with ad.GradTape() as tape:
            terms = losses.compute_terms(*four_forwards(tiny_params, average, dual_batch), dual_batch, config)
            total = losses.objective(terms, config)
        tape.backward(total)
        assert all(node.grad is None for _, node in average.items())
        assert all(node.grad is not None for _, node in tiny_params.items())

    def test_mean_reduction_divides_by_sentences(self, tiny_params64, dual_batch):
        average = tiny_params64.copy(requires_grad=False)
        outputs = four_forwards(tiny_params64, average, dual_batch)
        summed = losses.compute_terms(*outputs, dual_batch, LossConfig(batch_reduction="sum")).as_floats()
        meaned = losses.compute_terms(*outputs, dual_batch, LossConfig(batch_reduction="mean")).as_floats()
        for name in ("nll1", "nll2", "len"):
            assert meaned[name] == pytest.approx(summed[name] / 2, rel=1e-12)
        for name in losses.KL_TERMS:
            assert meaned[name] == pytest.approx(summed[name], rel=1e-12)

    def test_default_reduction_sums_length_loss(self, tiny_params64, dual_batch):
        assert LossConfig().batch_reduction == "sum"
        average = tiny_params64.copy(requires_grad=False)
        outputs = four_forwards(tiny_params64, average, dual_batch)
        terms = losses.compute_terms(*outputs, dual_batch, LossConfig())
        logits = outputs[0].length_logits.value
        logp = logits - np.logaddexp.reduce(logits, axis=-1, keepdims=True)
        per_sentence = [-logp[i, n - 1] for i, n in enumerate(dual_batch.true_lengths())]
        assert float(terms.len.value) == pytest.approx(sum(per_sentence), rel=1e-12)

    def test_objective_matches_breakdown_total(self, tiny_params64, dual_batch):
        average = tiny_params64.copy(requires_grad=False)
        for _, node in average.items():
            node.value += 0.01
        config = LossConfig(lambda_=0.5)
        terms = losses.compute_terms(*four_forwards(tiny_params64, average, dual_batch), dual_batch, config)
        breakdown = losses.total_loss(terms, config)
        assert float(losses.objective(terms, config).value) == pytest.approx(breakdown.total, rel=1e-12)
        assert breakdown.kl_nonnegative()

    def test_nll_per_token_is_unsmoothed(self, tiny_params64, dual_batch):
        average = tiny_params64.copy(requires_grad=False)
        outputs = four_forwards(tiny_params64, average, dual_batch)
        terms = losses.compute_terms(*outputs, dual_batch, LossConfig(label_smoothing=0.0, batch_reduction="sum"))
        assert terms.token_count == 3 + 1 + 3 + 1
        assert terms.nll_per_token() == pytest.approx(
            (float(terms.nll1.value) + float(terms.nll2.value)) / terms.token_count, rel=1e-9
        )


class TestTotalLoss:
    VALUES = {"nll1": 2.0, "nll2": 4.0, "mkl1": 0.5, "mkl2": 0.5, "skl1": 1.0, "skl2": 1.0, "skl3": 1.0, "len": 0.25}

    def test_formula(self):
        breakdown = losses.total_loss(self.VALUES, LossConfig(lambda_=0.5))
        assert breakdown.total == pytest.approx(3.0 + 0.1 * 4.0 + 0.25)

    def test_disabled_regularizers_keep_divisor(self):
        config = LossConfig(lambda_=0.5, use_shared_mask_consistency=False)
        assert losses.total_loss(self.VALUES, config).total == pytest.approx(3.0 + 0.1 * 1.0 + 0.25)
        assert losses.coefficients(config)["skl1"] == 0.0
        assert losses.coefficients(config)["mkl1"] == pytest.approx(0.1)

    def test_lambda_zero_is_plain_cmlm(self):
        assert losses.total_loss(self.VALUES, LossConfig(lambda_=0.0)).total == pytest.approx(3.25)

    def test_missing_term(self):
        with pytest.raises(ValueError):
            losses.total_loss({"nll1": 1.0}, LossConfig())

    def test_kl_violations(self):
        values = dict(self.VALUES, total=0.0, skl2=-1e-3)
        assert losses.kl_violations(LossBreakdown(**values)) == ["skl2"]


class TestLengthLoss:
    def test_cross_entropy(self, rng):
        logits = rng.standard_normal((2, 5))
        got = float(losses.length_loss(ad.constant(logits, np.float64), [1, 5]).value)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        assert got == pytest.approx(-(logp[0, 0] + logp[1, 4]), rel=1e-12)

    def test_length_out_of_range(self):
        with pytest.raises(CorpusError):
            losses.length_loss(ad.constant(np.zeros((1, 4))), [5])


class TestGradients:
    def test_every_term_passes_grad_check(self):
        reports = check_objective_gradients(max_coords=3)
        failed = {name: r.max_rel_error for name, r in reports.items() if not r.passed}
        assert failed == {}
        assert set(reports) == set(losses.TERM_NAMES) | {"total"}

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(1, 21))
    def test_terms_pass_across_seeds(self, seed):
        reports = check_objective_gradients(max_coords=3, seed=seed)
        failed = {name: r.max_rel_error for name, r in reports.items() if not r.passed}
        assert failed == {}
        assert all(r.coordinates > 0 for r in reports.values())

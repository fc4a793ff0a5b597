import math

import numpy as np
from django.test import SimpleTestCase

from .data_io import synth_clusters
from .exceptions import ConfigurationError, DivergenceError, LabelError, RankError, RankOrderError
from .layers import Activation, build_mlp, forward
from .linalg import relative_error, seeded_rng
from .training import (
    AblationMode,
    CurriculumSampler,
    GradientSet,
    MetricRecord,
    MetricsLog,
    SgdMomentum,
    TrainConfig,
    UncertaintyParams,
    cross_entropy,
    penalty_targets,
    sample_ranks,
    surrogate_term,
    total_objective,
    train,
)


class CrossEntropyTests(SimpleTestCase):
    def test_uniform_logits(self):
        result = cross_entropy(np.zeros((4, 10)), np.array([0, 3, 9, 5]))
        self.assertAlmostEqual(result.loss, math.log(10), places=12)

    def test_saturated_logits(self):
        logits = np.zeros((2, 3))
        logits[0, 1] = logits[1, 2] = 1000.0
        result = cross_entropy(logits, np.array([1, 2]))
        self.assertLess(result.loss, 1e-6)
        self.assertTrue(np.all(np.isfinite(result.dlogits)))
        self.assertEqual(result.correct, 2)

    def test_gradient_matches_finite_differences(self):
        rng = seeded_rng(0)
        logits, labels = rng.standard_normal((3, 4)), np.array([0, 2, 3])
        numeric = np.zeros_like(logits)
        h = 1e-6
        for idx in np.ndindex(logits.shape):
            plus, minus = logits.copy(), logits.copy()
            plus[idx] += h
            minus[idx] -= h
            numeric[idx] = (cross_entropy(plus, labels).loss - cross_entropy(minus, labels).loss) / (2 * h)
        self.assertLess(relative_error(cross_entropy(logits, labels).dlogits, numeric), 1e-6)

    def test_label_out_of_range(self):
        with self.assertRaises(LabelError):
            cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
        with self.assertRaises(LabelError):
            cross_entropy(np.zeros((1, 3)), np.array([-1]))


class SurrogateTests(SimpleTestCase):
    def test_zero_log_variance_is_plain_loss(self):
        term = surrogate_term(0.7, 0.0)
        self.assertEqual(term.value, 0.7)
        self.assertEqual(term.d_loss_coeff, 1.0)

    def test_stationary_point(self):
        self.assertEqual(surrogate_term(1.0, 0.0).ds, 0.0)

    def test_attenuation(self):
        self.assertLess(surrogate_term(2.0, 30.0).d_loss_coeff, 1e-12)

    def test_gradient_descent_on_s_reaches_log_loss(self):
        s, loss = 0.0, 0.7
        for _ in range(200):
            s -= 0.5 * surrogate_term(loss, s).ds
        self.assertAlmostEqual(s, math.log(loss), delta=1e-4)


class ObjectiveGradientTests(SimpleTestCase):
    """Analytic gradients against central finite differences of the scalar loss."""

    step = 1e-5

    def setUp(self):
        rng = seeded_rng(42)
        self.model = build_mlp(rng, [16, 16, 5], max_rank=8, activation=Activation.GELU)
        for layer in self.model.layers:
            layer.bias[:] = 0.1 * rng.standard_normal(layer.bias.shape)
        self.batch = (rng.standard_normal((6, 16)), np.array([0, 1, 2, 3, 4, 1]))
        self.u = UncertaintyParams({8: 0.3, 3: -0.2})
        self.anchor, self.variant = 8, 3

    def objective(self, mode, u, targets):
        return total_objective(
            self.model, self.batch, self.anchor, self.variant, u,
            mode=mode, use_uncertainty=True, reg_weight=0.5, targets=targets,
        )

    def check_mode(self, mode):
        targets = penalty_targets(self.model, self.batch[0], self.anchor)
        analytic = self.objective(mode, self.u.copy(), targets).grads
        h = self.step
        for i, layer in enumerate(self.model.layers):
            for name, param in layer.params().items():
                numeric = np.zeros_like(param)
                for idx in np.ndindex(param.shape):
                    original = param[idx]
                    param[idx] = original + h
                    plus = self.objective(mode, self.u.copy(), targets).loss
                    param[idx] = original - h
                    minus = self.objective(mode, self.u.copy(), targets).loss
                    param[idx] = original
                    numeric[idx] = (plus - minus) / (2 * h)
                with self.subTest(mode=mode.value, layer=i, param=name):
                    self.assertLess(relative_error(analytic.layers[i][name], numeric), 1e-5)
        if mode.uses_variant:
            ranks = (self.anchor, self.variant)
        else:
            ranks = (self.anchor,)
        for rank in ranks:
            plus, minus = self.u.copy(), self.u.copy()
            plus[rank] = self.u[rank] + h
            minus[rank] = self.u[rank] - h
            numeric = (self.objective(mode, plus, targets).loss - self.objective(mode, minus, targets).loss) / (2 * h)
            with self.subTest(mode=mode.value, s=rank):
                self.assertAlmostEqual(analytic.ds[rank], numeric, delta=1e-5 * max(1.0, abs(numeric)))

    def test_ce_only(self):
        self.check_mode(AblationMode.CE_ONLY)

    def test_ce_hard_ortho(self):
        self.check_mode(AblationMode.CE_HARD_ORTHO)

    def test_two_ce(self):
        self.check_mode(AblationMode.TWO_CE)

    def test_two_ce_logits_reg(self):
        self.check_mode(AblationMode.TWO_CE_LOGITS_REG)

    def test_two_ce_residual_ortho(self):
        self.check_mode(AblationMode.TWO_CE_RESIDUAL_ORTHO)

    def test_two_ce_hidden_reg(self):
        self.check_mode(AblationMode.TWO_CE_HIDDEN_REG)


class ObjectiveTests(SimpleTestCase):
    def setUp(self):
        rng = seeded_rng(7)
        self.model = build_mlp(rng, [6, 8, 3], max_rank=6)
        self.x = rng.standard_normal((5, 6))
        self.y = np.array([0, 1, 2, 0, 1])

    def test_ce_only_is_anchor_cross_entropy(self):
        result = total_objective(self.model, (self.x, self.y), 6, None, UncertaintyParams(),
                                 mode=AblationMode.CE_ONLY, use_uncertainty=False)
        self.assertEqual(result.loss, cross_entropy(forward(self.model, self.x, 6), self.y).loss)

    def test_two_ce_with_zero_s_sums_both_terms(self):
        result = total_objective(self.model, (self.x, self.y), 6, 2, UncertaintyParams())
        expected = cross_entropy(forward(self.model, self.x, 6), self.y).loss + \
            cross_entropy(forward(self.model, self.x, 2), self.y).loss
        self.assertAlmostEqual(result.loss, expected, places=12)

    def test_variant_must_be_below_anchor(self):
        with self.assertRaises(RankOrderError):
            total_objective(self.model, (self.x, self.y), 4, 4, UncertaintyParams())

    def test_gradient_confined_to_rank(self):
        result = total_objective(self.model, (self.x, self.y), 4, None, UncertaintyParams(),
                                 mode=AblationMode.CE_ONLY)
        for grads in result.grads.layers:
            np.testing.assert_array_equal(grads['a'][4:], 0.0)
            np.testing.assert_array_equal(grads['b'][:, 4:], 0.0)
            self.assertGreater(np.abs(grads['a'][:4]).sum(), 0.0)

    def test_halving_variance_doubles_weight_gradient(self):
        base = total_objective(self.model, (self.x, self.y), 6, None, UncertaintyParams({6: 0.0}),
                               mode=AblationMode.CE_ONLY)
        scaled = total_objective(self.model, (self.x, self.y), 6, None, UncertaintyParams({6: -math.log(2.0)}),
                                 mode=AblationMode.CE_ONLY)
        for a, b in zip(base.grads.layers, scaled.grads.layers):
            for name in a:
                np.testing.assert_allclose(b[name], 2.0 * a[name], rtol=1e-12, atol=1e-300)


class SamplerTests(SimpleTestCase):
    def sampler(self, **kwargs):
        options = dict(anchor_rank=32, rank_pool=[1, 2, 4, 8, 16], epochs=10, seed=3)
        options.update(kwargs)
        return CurriculumSampler(**options)

    def test_first_epoch_only_highest_variant(self):
        sampler = self.sampler()
        self.assertEqual(sampler.horizon(0), 1)
        self.assertEqual({sample_ranks(sampler, 0) for _ in range(50)}, {(32, 16)})

    def test_horizon_grows_to_full_pool_by_midpoint(self):
        sampler = self.sampler()
        horizons = [sampler.horizon(e) for e in range(10)]
        self.assertEqual(horizons, sorted(horizons))
        self.assertEqual(horizons[4], 5)
        self.assertEqual(horizons[-1], 5)

    def test_full_horizon_is_uniform(self):
        sampler = self.sampler()
        draws = [sample_ranks(sampler, 9) for _ in range(10_000)]
        self.assertTrue(all(anchor == 32 for anchor, _ in draws))
        counts = np.bincount([variant for _, variant in draws], minlength=17)[[1, 2, 4, 8, 16]]
        sigma = math.sqrt(10_000 * 0.2 * 0.8)
        self.assertTrue(np.all(np.abs(counts - 2000) < 4 * sigma), counts)

    def test_deterministic_per_seed(self):
        first, second = self.sampler(), self.sampler()
        self.assertEqual([first.sample(9) for _ in range(20)], [second.sample(9) for _ in range(20)])

    def test_uniform_variant(self):
        self.assertEqual(self.sampler(curriculum=False).horizon(0), 5)

    def test_schedule(self):
        sampler = self.sampler(schedule={2: 2, 5: 4})
        with self.assertRaises(ConfigurationError):
            sampler.sample(0)
        self.assertEqual(sampler.admissible(3), (16, 8))
        self.assertEqual(sampler.admissible(7), (16, 8, 4, 2))
        with self.assertRaises(ConfigurationError):
            self.sampler(schedule={0: 3, 1: 2})

    def test_pool_must_stay_below_anchor(self):
        with self.assertRaises(RankOrderError):
            self.sampler(rank_pool=[4, 32])
        with self.assertRaises(ConfigurationError):
            self.sampler(rank_pool=[])
        with self.assertRaises(ConfigurationError):
            self.sampler().sample(-1)


class TrainConfigTests(SimpleTestCase):
    def test_defaults(self):
        config = TrainConfig()
        self.assertEqual(config.eval_ranks, (1, 2, 4, 8, 16, 32))
        self.assertIs(config.mode, AblationMode.TWO_CE)

    def test_mode_parsing(self):
        self.assertIs(TrainConfig(mode='ce_hard_ortho').mode, AblationMode.CE_HARD_ORTHO)
        with self.assertRaises(ConfigurationError):
            TrainConfig(mode='three_ce')

    def test_interpolated_ranks_must_be_untrained(self):
        with self.assertRaises(ConfigurationError):
            TrainConfig(interpolated_eval_ranks=(3, 8))

    def test_eval_ranks_within_anchor(self):
        with self.assertRaises(RankError):
            TrainConfig(eval_ranks=(64,))


class TrainTests(SimpleTestCase):
    def setUp(self):
        self.data = synth_clusters(0, 2, 8, 100, 8.0)
        self.model = build_mlp(seeded_rng(1), [8, 2], max_rank=8)

    def config(self, **kwargs):
        options = dict(epochs=30, batch_size=32, learning_rate=0.02, anchor_rank=8, rank_pool=(1, 2, 4),
                       interpolated_eval_ranks=(3,), seed=5)
        options.update(kwargs)
        return TrainConfig(**options)

    def test_zero_epochs_is_a_no_op(self):
        result = train(self.model, self.data, self.config(epochs=0))
        self.assertEqual(result.model, self.model)
        self.assertEqual(len(result.metrics), 0)

    def test_separable_blobs(self):
        result = train(self.model, self.data, self.config())
        final = result.metrics.final('id_eval')
        self.assertGreaterEqual(final[8].accuracy, 0.95)
        self.assertEqual(sorted(final), [1, 2, 4, 8])
        self.assertEqual(sorted(result.metrics.final('ood_eval')), [3])

    def test_input_model_untouched(self):
        before = self.model.copy()
        train(self.model, self.data, self.config(epochs=2))
        self.assertEqual(self.model, before)

    def test_deterministic(self):
        a = train(self.model, self.data, self.config(epochs=3))
        b = train(self.model, self.data, self.config(epochs=3))
        self.assertEqual(a.model, b.model)
        self.assertEqual(a.metrics, b.metrics)
        self.assertEqual(a.uncertainty, b.uncertainty)

    def test_epoch_callback_gets_every_record(self):
        seen = []
        result = train(self.model, self.data, self.config(epochs=2), on_epoch=seen.extend)
        self.assertEqual(seen, result.metrics.records)

    def test_divergence(self):
        with self.assertRaises(DivergenceError) as ctx:
            train(self.model, self.data, self.config(), uncertainty=UncertaintyParams({8: -800.0}))
        self.assertEqual((ctx.exception.epoch, ctx.exception.step), (0, 0))
        self.assertEqual(ctx.exception.exit_code, 4)

    def test_anchor_above_max_rank(self):
        with self.assertRaises(RankError):
            train(self.model, self.data, self.config(anchor_rank=16, rank_pool=(1, 2)))


class OptimizerTests(SimpleTestCase):
    def test_momentum_steps(self):
        model = build_mlp(seeded_rng(0), [2, 2], max_rank=1)
        start = model.layers[0].a.copy()
        grads = GradientSet.zeros_like(model)
        grads.layers[0]['a'][:] = 1.0
        grads.ds[1] = 2.0
        u = UncertaintyParams()
        optimizer = SgdMomentum(0.1, momentum=0.5)
        optimizer.step(model, grads, u)
        np.testing.assert_allclose(model.layers[0].a, start - 0.1)
        self.assertAlmostEqual(u[1], -0.2)
        optimizer.step(model, grads, u)
        np.testing.assert_allclose(model.layers[0].a, start - 0.1 - 0.15)
        self.assertAlmostEqual(u[1], -0.2 - 0.3)


class MetricsLogTests(SimpleTestCase):
    def test_summary_uses_final_epoch(self):
        log = MetricsLog([
            MetricRecord(0, 'id_eval', 8, 1.0, 0.1),
            MetricRecord(1, 'id_eval', 8, 0.5, 0.9),
            MetricRecord(1, 'id_eval', 2, 0.7, 0.5),
            MetricRecord(1, 'ood_eval', 3, 0.6, 0.7),
            MetricRecord(1, 'train', 8, 0.4, 0.95),
        ])
        summary = log.summary(TrainConfig(anchor_rank=8, rank_pool=(2,)))
        self.assertEqual(summary.highest, 0.9)
        self.assertAlmostEqual(summary.avg_id, 0.7)
        self.assertEqual(summary.avg_ood, 0.7)

    def test_records_are_ordered(self):
        log = MetricsLog()
        log.add(MetricRecord(1, 'train', 8, 0.0, 0.0))
        log.add(MetricRecord(0, 'ood_eval', 3, 0.0, 0.0))
        log.add(MetricRecord(0, 'id_eval', 8, 0.0, 0.0))
        self.assertEqual([(r.epoch, r.phase) for r in log], [(0, 'id_eval'), (0, 'ood_eval'), (1, 'train')])

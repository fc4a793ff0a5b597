import numpy as np
from django.test import SimpleTestCase

from .data_io import Checkpoint
from .exceptions import PlanError, RankError
from .layers import FULL, DenseLayer, NsnLayer, build_mlp, forward
from .linalg import seeded_rng, svd
from .surgery import SurgeryPlan, surgical_replace, svd_init, truncation_errors
from .training import UncertaintyParams


class SvdInitTests(SimpleTestCase):
    def test_diagonal(self):
        a, b = svd_init(np.diag([3.0, 1.0]), 2)
        root3 = np.sqrt(3.0)
        np.testing.assert_allclose(a, [[root3, 0.0], [0.0, 1.0]], atol=1e-14)
        np.testing.assert_allclose(b, [[root3, 0.0], [0.0, 1.0]], atol=1e-14)

        a, b = svd_init(np.diag([3.0, 1.0]), 1)
        np.testing.assert_allclose(b @ a, [[3.0, 0.0], [0.0, 0.0]], atol=1e-14)

    def test_zero_weight(self):
        a, b = svd_init(np.zeros((3, 2)), 1)
        np.testing.assert_array_equal(b @ a, 0.0)

    def test_rank_bounds(self):
        for rank in (0, 3):
            with self.assertRaises(RankError):
                svd_init(np.ones((4, 2)), rank)

    def test_prefixes_are_best_approximations(self):
        w = seeded_rng(0).standard_normal((9, 6))
        a, b = svd_init(w, 6)
        for row in truncation_errors(w, a, b):
            with self.subTest(rank=row.rank):
                self.assertAlmostEqual(row.actual, row.predicted, delta=1e-8)

    def test_factor_norms_follow_singular_values(self):
        w = seeded_rng(1).standard_normal((7, 5))
        a, b = svd_init(w, 5)
        root = np.sqrt(svd(w).singular_values)
        np.testing.assert_allclose(np.linalg.norm(a, axis=1), root, rtol=1e-10)
        np.testing.assert_allclose(np.linalg.norm(b, axis=0), root, rtol=1e-10)


class SurgicalReplaceTests(SimpleTestCase):
    def setUp(self):
        self.dense = build_mlp(seeded_rng(2), [8, 12, 6, 4], kind='dense')
        for layer in self.dense.layers:
            layer.bias[:] = seeded_rng(3).standard_normal(layer.bias.shape)
        self.checkpoint = Checkpoint(self.dense, UncertaintyParams({1: 0.5}), {'seed': 2})

    def test_lossless_at_full_rank(self):
        result = surgical_replace(self.checkpoint, SurgeryPlan(frozenset({0, 1, 2})))
        model = result.checkpoint.model
        self.assertTrue(all(isinstance(layer, NsnLayer) for layer in model.layers))
        self.assertEqual([e['max_rank'] for e in result.report], [8, 6, 4])
        x = seeded_rng(4).standard_normal((1000, 8))
        np.testing.assert_allclose(forward(model, x, FULL), forward(self.dense, x), atol=1e-6)
        self.assertEqual(result.checkpoint.meta, {'seed': 2, 'surgery': {'0': 8, '1': 6, '2': 4}})
        self.assertEqual(result.checkpoint.uncertainty, UncertaintyParams({1: 0.5}))

    def test_bias_copied_and_other_layers_untouched(self):
        result = surgical_replace(self.checkpoint, SurgeryPlan({1}, target_max_rank=2))
        model = result.checkpoint.model
        np.testing.assert_array_equal(model.layers[1].bias, self.dense.layers[1].bias)
        self.assertIsInstance(model.layers[0], DenseLayer)
        self.assertEqual(model.layers[0], self.dense.layers[0])
        self.assertEqual(model.layers[1].max_rank, 2)

    def test_empty_plan_changes_nothing(self):
        result = surgical_replace(self.checkpoint, SurgeryPlan())
        self.assertEqual(result.report, [])
        self.assertEqual(result.checkpoint.model, self.dense)
        self.assertEqual(result.checkpoint.meta, {'seed': 2})

    def test_rank_one_is_cheaper_than_dense(self):
        entry = surgical_replace(self.checkpoint, SurgeryPlan({0}, target_max_rank=1)).report[0]
        self.assertEqual(entry['flops_dense'], 2 * 8 * 12)
        self.assertEqual(entry['flops_at_max_rank'], 2 * (8 + 12))
        self.assertLess(entry['flops_at_max_rank'], entry['flops_dense'])
        self.assertGreater(entry['relative_truncation_error'], 0.0)

    def test_per_layer_ranks(self):
        result = surgical_replace(self.checkpoint, SurgeryPlan({0, 2}, target_max_rank={0: 3, 2: None}))
        self.assertEqual([e['max_rank'] for e in result.report], [3, 4])

    def test_plan_errors(self):
        with self.assertRaises(PlanError):
            surgical_replace(self.checkpoint, SurgeryPlan({3}))
        with self.assertRaises(PlanError):
            surgical_replace(self.checkpoint, SurgeryPlan({1}, target_max_rank=7))
        with self.assertRaises(PlanError):
            SurgeryPlan({0}, target_max_rank={1: 2})
        with self.assertRaises(PlanError):
            SurgeryPlan({0}, target_max_rank=0)
        replaced = surgical_replace(self.checkpoint, SurgeryPlan({0})).checkpoint
        with self.assertRaisesMessage(PlanError, 'already NSN'):
            surgical_replace(replaced, SurgeryPlan({0}))

    def test_input_checkpoint_not_modified(self):
        before = self.dense.copy()
        result = surgical_replace(self.checkpoint, SurgeryPlan({0, 1}))
        result.checkpoint.model.layers[2].w[0, 0] += 1.0
        self.assertEqual(self.checkpoint.model, before)

import numpy as np
from django.test import SimpleTestCase

from .analysis import (
    adjacent_perturbation_check,
    bound_fuzz,
    containment_grid,
    containment_score,
    convergence_similarity,
    energy_decay_audit,
    frontier_sweep,
    inter_layer_similarity,
    interpolation_bound_report,
    lemma_fuzz,
    monotonicity_violation,
    probe_layer,
    similarity_curve,
    uncertainty_rank_correlation,
)
from .data_io import Checkpoint, synth_clusters
from .exceptions import AnalysisError, RankError
from .layers import FULL, Block, Model, NsnLayer, build_mlp, flops_linear, init_nsn_layer
from .linalg import seeded_rng
from .surgery import SurgeryPlan, surgical_replace, svd_init
from .training import UncertaintyParams


def svd_layer(seed, d_out, d_in, max_rank):
    w = seeded_rng(seed).standard_normal((d_out, d_in))
    a, b = svd_init(w, max_rank)
    return NsnLayer(a=a, b=b, bias=np.zeros(d_out))


class ContainmentTests(SimpleTestCase):
    def test_self_and_orthogonal(self):
        w = seeded_rng(0).standard_normal((5, 4))
        self.assertAlmostEqual(containment_score(w, w, 2, 2), 1.0, places=12)
        e1, e2 = np.zeros((3, 3)), np.zeros((3, 3))
        e1[0, 0] = e2[1, 1] = 1.0
        self.assertAlmostEqual(containment_score(e1, e2, 1, 1), 0.0, places=12)

    def test_random_factors_are_nested(self):
        layer = init_nsn_layer(seeded_rng(1), d_in=12, d_out=10, max_rank=6)
        grid = containment_grid(layer, [1, 2, 3, 6])
        self.assertTrue(grid.nested())
        self.assertGreaterEqual(grid.upper_triangle().min(), 1 - 1e-8)

    def test_lower_triangle_is_rank_ratio(self):
        grid = containment_grid(svd_layer(2, 10, 8, 8), [1, 2, 4, 8])
        self.assertAlmostEqual(grid.scores[2, 0], 0.25, delta=1e-9)
        self.assertAlmostEqual(grid.scores[3, 1], 0.25, delta=1e-9)
        self.assertTrue(np.all(grid.lower_triangle() <= 0.5 + 1e-9))

    def test_ranks_bounded_by_layer(self):
        with self.assertRaises(RankError):
            containment_grid(svd_layer(2, 5, 4, 4), [1, 5])


class EnergyTests(SimpleTestCase):
    def test_svd_init_decays(self):
        audit = energy_decay_audit(svd_layer(3, 9, 7, 7))
        self.assertEqual(audit.violation_count, 0)
        self.assertEqual(audit.violation_fraction, 0.0)

    def test_swapped_rows_are_flagged(self):
        layer = svd_layer(3, 9, 7, 7)
        layer.a[[1, 2]] = layer.a[[2, 1]]
        audit = energy_decay_audit(layer)
        self.assertIn(('a', 3), [(v['factor'], v['index']) for v in audit.violations])
        self.assertNotIn('b', [v['factor'] for v in audit.violations])
        self.assertEqual(audit.to_dict()['violation_count'], audit.violation_count)


class PerturbationTests(SimpleTestCase):
    def setUp(self):
        self.layer = init_nsn_layer(seeded_rng(4), d_in=6, d_out=5, max_rank=4)

    def test_zero_input(self):
        check = adjacent_perturbation_check(self.layer, np.zeros(6), 2)
        self.assertEqual((check.lhs, check.rhs), (0.0, 0.0))
        self.assertTrue(check.satisfied)

    def test_parallel_input_is_tight(self):
        x = 2.5 * self.layer.a[2]
        check = adjacent_perturbation_check(self.layer, x, 2)
        self.assertAlmostEqual(check.lhs, check.rhs, delta=1e-12 * check.rhs)

    def test_rank_range(self):
        for r in (0, 4):
            with self.assertRaises(RankError):
                adjacent_perturbation_check(self.layer, np.ones(6), r)

    def test_fuzz_finds_no_violation(self):
        layers = [self.layer, init_nsn_layer(seeded_rng(5), d_in=12, d_out=3, max_rank=8)]
        report = lemma_fuzz(layers, seeded_rng(0), samples=10_000)
        self.assertEqual(report.violations, 0)
        self.assertGreaterEqual(report.worst_slack, -1e-9)

    def test_fuzz_needs_rank_two(self):
        with self.assertRaises(AnalysisError):
            lemma_fuzz([init_nsn_layer(seeded_rng(0), 3, 3, 1)], seeded_rng(0), samples=1)


class InterpolationBoundTests(SimpleTestCase):
    def setUp(self):
        self.data = synth_clusters(0, 3, 8, 40, 3.0)
        self.layer = init_nsn_layer(seeded_rng(6), d_in=8, d_out=3, max_rank=6)
        self.model = Model([Block(self.layer)])

    def test_equal_ranks_have_zero_gap(self):
        report = interpolation_bound_report(self.model, self.data, 3, 3)
        self.assertEqual(report.empirical_gap, 0.0)
        self.assertEqual(report.bound, 0.0)
        self.assertTrue(report.holds)

    def test_zeroed_components_give_zero_bound(self):
        self.layer.a[2:4] = 0.0
        report = interpolation_bound_report(self.model, self.data, 2, 4)
        self.assertEqual(report.energies, (0.0, 0.0))
        self.assertLess(report.empirical_gap, 1e-12)
        self.assertTrue(report.holds)

    def test_bound_dominates_gap(self):
        report = interpolation_bound_report(self.model, self.data, 1, 6)
        self.assertTrue(report.holds)
        self.assertGreater(report.empirical_gap, 0.0)
        fuzz = bound_fuzz(self.layer, self.data, seeded_rng(1), pairs=200)
        self.assertTrue(fuzz.all_dominated)
        self.assertGreaterEqual(fuzz.worst_margin, 0.0)

    def test_rank_order(self):
        with self.assertRaises(RankError):
            interpolation_bound_report(self.model, self.data, 4, 2)

    def test_deep_model_needs_probe(self):
        deep = build_mlp(seeded_rng(7), [8, 10, 3], max_rank=4)
        with self.assertRaises(AnalysisError):
            interpolation_bound_report(deep, self.data, 1, 2)
        report = interpolation_bound_report(deep, self.data, 1, 4, probe=True)
        self.assertTrue(report.holds)
        layer, inputs = probe_layer(deep, self.data.features, probe=True)
        self.assertIs(layer, deep.layers[-1])
        self.assertEqual(inputs.shape, (120, 10))
        self.assertTrue(np.all(inputs >= 0.0))


class SimilarityTests(SimpleTestCase):
    def dense(self, dims, seed=0):
        return build_mlp(seeded_rng(seed), dims, kind='dense')

    def test_identical_and_negated(self):
        model = self.dense([4, 4, 4])
        model.layers[1].w[:] = model.layers[0].w
        self.assertAlmostEqual(inter_layer_similarity(model).similarity, 1.0, places=12)
        model.layers[1].w[:] = -model.layers[0].w
        self.assertAlmostEqual(inter_layer_similarity(model).similarity, -1.0, places=12)

    def test_random_wide_layers_are_near_orthogonal(self):
        report = inter_layer_similarity(self.dense([256, 256, 256]))
        self.assertLess(abs(report.similarity), 0.1)
        self.assertEqual(report.layers, (0, 1))

    def test_odd_shapes_are_excluded(self):
        report = inter_layer_similarity(self.dense([5, 5, 5, 2]))
        self.assertEqual((report.layers, report.excluded), ((0, 1), (2,)))
        with self.assertRaises(AnalysisError):
            inter_layer_similarity(self.dense([4, 3, 2]))

    def test_curve_over_ranks(self):
        model = build_mlp(seeded_rng(1), [6, 6, 6, 6], max_rank=4)
        curve = similarity_curve(model, [4, 1, 2, 2])
        self.assertEqual([s.rank for s in curve], [1, 2, 4])

    def test_convergence_after_surgery(self):
        reference = self.dense([6, 6, 6, 6], seed=2)
        nsn = surgical_replace(Checkpoint(reference), SurgeryPlan({0, 1, 2})).checkpoint.model
        full = convergence_similarity(nsn, reference, FULL)
        for group in full:
            self.assertAlmostEqual(group.similarity, 1.0, places=10)
        curve = [convergence_similarity(nsn, reference, r, [(0, 3)])[0].similarity for r in range(1, 7)]
        self.assertTrue(all(b >= a - 1e-12 for a, b in zip(curve, curve[1:])), curve)
        with self.assertRaises(AnalysisError):
            convergence_similarity(nsn, reference, 2, [(2, 5)])


class FrontierTests(SimpleTestCase):
    def setUp(self):
        self.data = synth_clusters(0, 3, 8, 20, 3.0)

    def test_dense_model_is_rank_independent(self):
        table = frontier_sweep(build_mlp(seeded_rng(0), [8, 12, 3], kind='dense'), self.data, [1, 2, 4])
        self.assertEqual(len(set(table.column('accuracy'))), 1)
        self.assertEqual(len(set(table.column('flops'))), 1)

    def test_flops_follow_closed_form(self):
        model = build_mlp(seeded_rng(0), [8, 12, 3], max_rank=4)
        u = UncertaintyParams({2: 0.5})
        table = frontier_sweep(model, self.data, [4, 1, 2, 3], u)
        self.assertEqual(table.column('rank'), [1, 2, 3, 4])
        self.assertEqual(table.column('flops'), [flops_linear(8, 12, r) + flops_linear(12, 3, r) for r in (1, 2, 3, 4)])
        self.assertEqual(table.column('s'), [None, 0.5, None, None])
        self.assertEqual(table.accuracy_at(2), table.rows[1].accuracy)
        with self.assertRaises(RankError):
            frontier_sweep(model, self.data, [8])

    def test_monotonicity_violation(self):
        self.assertEqual(monotonicity_violation([0.1, 0.2, 0.2, 0.9]), 0.0)
        self.assertAlmostEqual(monotonicity_violation([0.5, 0.7, 0.6, 0.9, 0.85]), 0.1)
        self.assertEqual(monotonicity_violation([]), 0.0)

    def test_uncertainty_rank_correlation(self):
        u = UncertaintyParams({1: 3.0, 2: 2.5, 4: 1.0, 8: -0.5})
        self.assertAlmostEqual(uncertainty_rank_correlation(u), -1.0)
        with self.assertRaises(AnalysisError):
            uncertainty_rank_correlation(u, [1, 16])
        with self.assertRaises(AnalysisError):
            uncertainty_rank_correlation(u, [1])

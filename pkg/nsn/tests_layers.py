import numpy as np
from django.test import SimpleTestCase

from .exceptions import DimensionError, RankError
from .layers import (
    FULL,
    Activation,
    Block,
    DenseLayer,
    Model,
    NsnLayer,
    break_even_rank,
    build_mlp,
    effective_weight,
    flops_linear,
    forward,
    init_nsn_layer,
    model_flops,
    parse_rank,
    truncate,
    truncate_model,
)
from .linalg import seeded_rng


class NsnLayerTests(SimpleTestCase):
    def setUp(self):
        self.rng = seeded_rng(0)
        self.layer = init_nsn_layer(self.rng, d_in=6, d_out=5, max_rank=4)

    def test_effective_weight_is_sum_of_outer_products(self):
        layer = self.layer
        for r in range(1, 5):
            expected = sum(np.outer(layer.b[:, i], layer.a[i]) for i in range(r))
            np.testing.assert_allclose(effective_weight(layer, r), expected, atol=1e-14)

    def test_effective_weight_rejects_bad_rank(self):
        for r in (0, 5):
            with self.assertRaises(RankError):
                effective_weight(self.layer, r)

    def test_forward_uses_factored_form(self):
        model = Model([Block(self.layer)])
        x = self.rng.standard_normal((3, 6))
        for r in (1, 3, FULL):
            expected = x @ effective_weight(self.layer, r).T + self.layer.bias
            np.testing.assert_allclose(forward(model, x, r), expected, atol=1e-12)

    def test_forward_clamps_global_rank(self):
        model = Model([Block(self.layer)])
        x = self.rng.standard_normal((2, 6))
        np.testing.assert_array_equal(forward(model, x, 100), forward(model, x, FULL))
        with self.assertRaises(RankError):
            forward(model, x, 0)

    def test_rows_above_rank_do_not_affect_output(self):
        model = Model([Block(self.layer)])
        x = self.rng.standard_normal((4, 6))
        before = forward(model, x, 2)
        self.layer.a[3] += 10.0
        self.layer.b[:, 2] -= 5.0
        np.testing.assert_array_equal(forward(model, x, 2), before)

    def test_input_shape_checked(self):
        with self.assertRaises(DimensionError):
            forward(Model([Block(self.layer)]), np.ones((2, 5)))

    def test_truncate(self):
        small = truncate(self.layer, 2)
        self.assertEqual(small.max_rank, 2)
        np.testing.assert_array_equal(effective_weight(small, FULL), effective_weight(self.layer, 2))
        with self.assertRaises(RankError):
            truncate(self.layer, 5)

    def test_layer_validation(self):
        with self.assertRaises(DimensionError):
            NsnLayer(a=np.ones((3, 4)), b=np.ones((2, 2)), bias=np.zeros(2))
        with self.assertRaises(DimensionError):
            NsnLayer(a=np.ones((2, 4)), b=np.ones((3, 2)), bias=np.zeros(2))


class ModelTests(SimpleTestCase):
    def test_build_mlp_topology(self):
        model = build_mlp(seeded_rng(1), [8, 16, 3], max_rank=4)
        self.assertEqual(model.input_dim, 8)
        self.assertEqual(model.output_dim, 3)
        self.assertEqual(model.nsn_indices(), [0, 1])
        self.assertEqual(model.max_rank, 4)
        self.assertIs(model.blocks[0].activation, Activation.RELU)
        self.assertIs(model.blocks[-1].activation, Activation.IDENTITY)

    def test_dense_model_has_no_rank(self):
        model = build_mlp(seeded_rng(1), [4, 4, 2], kind='dense')
        self.assertEqual(model.max_rank, 0)
        x = seeded_rng(2).standard_normal((3, 4))
        np.testing.assert_array_equal(forward(model, x, 1), forward(model, x, FULL))

    def test_model_validation(self):
        dense = DenseLayer(w=np.ones((3, 2)), bias=np.zeros(3))
        with self.assertRaises(DimensionError):
            Model([Block(dense, Activation.RELU), Block(dense)])
        with self.assertRaises(DimensionError):
            Model([Block(dense, Activation.RELU)])
        with self.assertRaises(DimensionError):
            Model([])

    def test_truncate_model_matches_forward(self):
        model = build_mlp(seeded_rng(5), [6, 10, 4], max_rank=5)
        x = seeded_rng(6).standard_normal((5, 6))
        np.testing.assert_allclose(forward(truncate_model(model, 3), x), forward(model, x, 3), atol=1e-12)

    def test_copy_is_independent(self):
        model = build_mlp(seeded_rng(5), [3, 2], max_rank=2)
        clone = model.copy()
        self.assertEqual(clone, model)
        clone.layers[0].a[0, 0] += 1.0
        self.assertNotEqual(clone, model)

    def test_parse_rank(self):
        self.assertIs(parse_rank('full'), FULL)
        self.assertIs(parse_rank(' FULL '), FULL)
        self.assertEqual(parse_rank('3'), 3)
        self.assertEqual(parse_rank(7), 7)
        for bad in (0, -1, 2.5, True):
            with self.assertRaises(RankError):
                parse_rank(bad)


class ActivationTests(SimpleTestCase):
    def test_derivatives_match_finite_differences(self):
        y = np.linspace(-3.0, 3.0, 13) + 0.05
        h = 1e-6
        for activation in Activation:
            numeric = (activation.apply(y + h) - activation.apply(y - h)) / (2 * h)
            np.testing.assert_allclose(activation.derivative(y), numeric, atol=1e-8)

    def test_gelu_values(self):
        self.assertEqual(Activation.GELU.apply(np.array([0.0]))[0], 0.0)
        self.assertAlmostEqual(Activation.GELU.apply(np.array([1.0]))[0], 0.8413447460685429, places=12)


class FlopsTests(SimpleTestCase):
    CASES = [
        # d_in, d_out, r, factored flops, break-even rank
        (1, 1, 1, 4, 0),
        (2, 2, 1, 8, 1),
        (4, 4, 2, 32, 2),
        (8, 4, 3, 72, 2),
        (10, 10, 5, 200, 5),
        (16, 16, 8, 512, 8),
        (16, 5, 8, 336, 3),
        (32, 10, 4, 336, 7),
        (64, 10, 4, 592, 8),
        (64, 128, 32, 12288, 42),
        (128, 10, 16, 4416, 9),
        (128, 64, 1, 384, 42),
        (100, 1, 1, 202, 0),
        (3, 7, 2, 40, 2),
        (256, 256, 128, 131072, 128),
        (512, 128, 64, 81920, 102),
        (768, 3072, 384, 2949120, 614),
        (1000, 10, 9, 18180, 9),
        (50, 50, 25, 5000, 25),
        (9, 12, 6, 252, 5),
    ]

    def test_hand_computed_counts(self):
        for d_in, d_out, r, flops, even in self.CASES:
            with self.subTest(d_in=d_in, d_out=d_out, r=r):
                self.assertEqual(flops_linear(d_in, d_out, r), flops)
                self.assertEqual(flops_linear(d_in, d_out, FULL), 2 * d_in * d_out)
                self.assertEqual(break_even_rank(d_in, d_out), even)

    def test_model_flops_sum_layers(self):
        model = build_mlp(seeded_rng(0), [64, 128, 10], max_rank=32)
        self.assertEqual(model_flops(model, 4), flops_linear(64, 128, 4) + flops_linear(128, 10, 4))
        self.assertEqual(model_flops(model, FULL), flops_linear(64, 128, 32) + flops_linear(128, 10, 32))
        counts = [model_flops(model, r) for r in range(1, 33)]
        self.assertTrue(all(a < b for a, b in zip(counts, counts[1:])))

    def test_rejects_empty_dims(self):
        with self.assertRaises(DimensionError):
            flops_linear(0, 3, 1)
        with self.assertRaises(DimensionError):
            break_even_rank(3, 0)

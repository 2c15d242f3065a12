"""Layer tests."""

import unittest

import numpy as np

from convmlp import checks
from convmlp import errors
from convmlp import nn


class InitTests(unittest.TestCase):
    """Parameter initialization tests."""

    def test_same_seed_bit_identical(self):
        """Test deterministic initialization."""
        first, second = nn.ChannelMLP(16, 2), nn.ChannelMLP(16, 2)

        nn.init_params(first, 7)
        nn.init_params(second, 7)

        for (name, one), (_, two) in zip(first.registry().values().items(),
                                         second.registry().values().items()):
            self.assertTrue(np.array_equal(one, two), name)

    def test_weight_statistics(self):
        """Test truncation at two standard deviations of 0.02."""
        layer = nn.Linear(256, 256)

        nn.init_params(layer, 0)

        weight = layer.param('weight')
        self.assertLessEqual(np.abs(weight).max(), 2 * nn.INIT_STD)
        self.assertLess(abs(weight.mean()), 1e-3)
        self.assertTrue(np.array_equal(layer.param('bias'), np.zeros(256)))

    def test_norm_scale_ones(self):
        """Test that norm gammas start at one and betas at zero."""
        norm = nn.LayerNorm2d(8)
        batch_norm = nn.BatchNorm2d(8)

        nn.init_params(norm, 0)
        nn.init_params(batch_norm, 0)

        self.assertTrue(np.array_equal(norm.param('weight'), np.ones(8)))
        self.assertTrue(np.array_equal(batch_norm.param('weight'),
                                       np.ones(8)))
        self.assertTrue(np.array_equal(batch_norm.param('bias'), np.zeros(8)))

    def test_unknown_scheme(self):
        """Test scheme validation."""
        with self.assertRaises(errors.ParameterError):
            nn.init_params(nn.Linear(2, 2), 0, scheme='xavier')


class RegistryTests(unittest.TestCase):
    """Parameter registry tests."""

    def test_names_and_roles(self):
        """Test qualified names, roles and decay flags."""
        layer = nn.Sequential(nn.Conv2d(3, 4, 3), nn.BatchNorm2d(4),
                              names=('conv', 'bn'))

        registry = layer.registry()

        self.assertEqual(registry.keys(), ['conv.weight', 'conv.bias',
                                           'bn.weight', 'bn.bias'])
        self.assertEqual([parameter.decay for parameter in registry],
                         [True, False, False, False])
        self.assertEqual(registry.find('bn.weight').role, 'scale')
        self.assertEqual(registry.total_size(), 4 * 3 * 9 + 4 + 4 + 4)

    def test_values_shared_with_layers(self):
        """Test that registry arrays are the layer's own arrays."""
        layer = nn.Linear(2, 3)

        registry = layer.registry()
        registry.find('weight').value[...] = 1.0
        registry.zero_grad()

        self.assertTrue(np.array_equal(layer.param('weight'),
                                       np.ones((3, 2))))

    def test_repeated_layer_rejected(self):
        """Test that one layer reachable twice is a consistency error."""
        shared = nn.Linear(2, 2)

        with self.assertRaises(errors.ConsistencyError):
            nn.Sequential(shared, shared).registry()

    def test_buffers(self):
        """Test buffer naming."""
        layer = nn.Sequential(nn.BatchNorm2d(2), names=('bn',))

        self.assertEqual([name for name, _ in layer.named_buffers()],
                         ['bn.running_mean', 'bn.running_var'])

    def test_cast(self):
        """Test casting parameters, gradients and buffers."""
        layer = nn.BatchNorm2d(2).cast(np.float32)

        self.assertEqual(layer.param('weight').dtype, np.float32)
        self.assertEqual(layer.grad('weight').dtype, np.float32)
        self.assertEqual(layer.buffer('running_var').dtype, np.float32)


class LayerShapeTests(unittest.TestCase):
    """Shape and MAC bookkeeping tests."""

    def test_conv_shape_and_macs(self):
        """Test a 3x3 64->64 conv at 56x56."""
        conv = nn.Conv2d(64, 64, 3, padding=1, bias=False)

        self.assertEqual(conv.output_shape((64, 56, 56)), (64, 56, 56))
        self.assertEqual(conv.macs((64, 56, 56)), 115605504)

    def test_linear_params(self):
        """Test the channel MLP expansion layer parameter count."""
        self.assertEqual(nn.Linear(128, 256).own_param_count(), 33024)

    def test_linear_macs_per_position(self):
        """Test linear MACs scale with positions."""
        self.assertEqual(nn.Linear(4, 8).macs((4, 3, 5)), 4 * 8 * 15)

    def test_conv_channel_mismatch(self):
        """Test that shape tracing checks channels."""
        with self.assertRaises(errors.DimensionError):
            nn.Conv2d(3, 4, 3).output_shape((5, 8, 8))

    def test_backward_before_forward(self):
        """Test the error raised without a cached forward pass."""
        with self.assertRaises(errors.Error):
            nn.ReLU().backward(np.ones(2))


class DropoutTests(unittest.TestCase):
    """Dropout tests."""

    def test_zero_probability_identity(self):
        """Test p=0 in train mode."""
        x = np.random.default_rng(0).standard_normal(10)

        out, mask = nn.dropout(x, 0.0, True, np.random.default_rng(0))

        self.assertIs(out, x)
        self.assertIsNone(mask)

    def test_eval_identity(self):
        """Test eval mode for any p."""
        x = np.ones(10)

        out, _ = nn.dropout(x, 0.9, False, np.random.default_rng(0))

        self.assertIs(out, x)

    def test_statistics(self):
        """Test survivor fraction and preserved mean at p=0.5."""
        x = np.ones(10 ** 6)

        out, _ = nn.dropout(x, 0.5, True, np.random.default_rng(0))

        self.assertLessEqual(abs(np.mean(out > 0) - 0.5), 0.01)
        self.assertLessEqual(abs(out.mean() - 1.0), 0.02)

    def test_invalid_probability(self):
        """Test that p >= 1 is rejected."""
        with self.assertRaises(errors.ParameterError):
            nn.dropout(np.ones(2), 1.0, True, np.random.default_rng(0))
        with self.assertRaises(errors.ParameterError):
            nn.Dropout(1.5)

    def test_layer_backward_uses_mask(self):
        """Test that dropped positions get no gradient."""
        layer = nn.Dropout(0.5, seed=3)
        out = layer.forward(np.ones((4, 4)))

        grad = layer.backward(np.ones((4, 4)))

        self.assertTrue(np.array_equal(grad == 0, out == 0))


class ResidualTests(unittest.TestCase):
    """Residual wrapper tests."""

    def test_zero_branch(self):
        """Test that a zero branch gives back the input."""
        body = nn.Linear(3, 3)
        x = np.random.default_rng(0).standard_normal((1, 3, 2, 2))

        self.assertTrue(np.array_equal(nn.Residual(body).forward(x), x))

    def test_identity_branch(self):
        """Test that an identity branch doubles the input."""
        body = nn.Linear(3, 3)
        body.param('weight')[...] = np.eye(3)
        x = np.random.default_rng(1).standard_normal((1, 3, 2, 2))

        self.assertTrue(np.allclose(nn.residual(body, x), 2 * x))

    def test_shape_change_rejected(self):
        """Test that a branch changing the shape is a dimension error."""
        with self.assertRaises(errors.DimensionError):
            nn.residual(nn.Linear(3, 4), np.ones((1, 3, 2, 2)))


class ChannelMLPTests(unittest.TestCase):
    """Channel MLP tests."""

    def test_zero_projection(self):
        """Test that zeroed fc2 gives zeros for any input."""
        mlp = nn.ChannelMLP(8, 2)
        nn.init_params(mlp, 0)
        mlp.children()[-1][1].param('weight')[...] = 0.0

        out = nn.channel_mlp_forward(
            mlp, np.random.default_rng(0).standard_normal((2, 8, 3, 3)))

        self.assertTrue(np.array_equal(out, np.zeros((2, 8, 3, 3))))

    def test_position_independence(self):
        """Test identical outputs for identical channel vectors."""
        mlp = nn.ChannelMLP(6, 2)
        nn.init_params(mlp, 1)
        vector = np.random.default_rng(1).standard_normal(6)
        small = np.broadcast_to(vector.reshape(1, 6, 1, 1), (1, 6, 7, 7))
        large = np.broadcast_to(vector.reshape(1, 6, 1, 1), (1, 6, 19, 31))

        out_small = nn.channel_mlp_forward(mlp, np.array(small))
        out_large = nn.channel_mlp_forward(mlp, np.array(large))

        self.assertTrue(np.allclose(out_small[0, :, 0, 0],
                                    out_large[0, :, 18, 30], rtol=0,
                                    atol=1e-12))
        self.assertTrue(np.allclose(out_large, out_large[:, :, :1, :1],
                                    rtol=0, atol=1e-12))

    def test_channel_mismatch(self):
        """Test the channel check."""
        with self.assertRaises(errors.DimensionError):
            nn.channel_mlp_forward(nn.ChannelMLP(4, 2), np.ones((1, 5, 2, 2)))

    def test_hidden_width(self):
        """Test the R * C expansion."""
        mlp = nn.ChannelMLP(128, 2)

        self.assertEqual(mlp.hidden, 256)
        self.assertEqual(mlp.registry().total_size(), 2 * 128 * 256 + 256 +
                         128)


class PatchMergeTests(unittest.TestCase):
    """Patch merging tests."""

    def test_constant_input(self):
        """Test that constant input maps to the projection of the repeat."""
        merge = nn.PatchMerge(3, 5)
        nn.init_params(merge, 0)
        vector = np.array([0.5, -1.0, 2.0])
        x = np.broadcast_to(vector.reshape(1, 3, 1, 1), (1, 3, 4, 6)).copy()

        out = merge.forward(x)

        reduction = merge.children()[0][1]
        expected = reduction.param('weight').dot(np.tile(vector, 4)) + \
            reduction.param('bias')
        self.assertEqual(out.shape, (1, 5, 2, 3))
        self.assertTrue(np.allclose(out, expected.reshape(1, 5, 1, 1)))

    def test_odd_extent(self):
        """Test the even-extent requirement in shape tracing."""
        with self.assertRaises(errors.GeometryError):
            nn.PatchMerge(2, 4).output_shape((2, 5, 4))


class GradientTests(unittest.TestCase):
    """Finite-difference checks of every layer kind."""

    def test_layers(self):
        """Test analytic gradients against central differences."""
        for name, error in sorted(checks.check_layer_gradients(0).items()):
            self.assertLessEqual(error, checks.LAYER_TOLERANCE, name)

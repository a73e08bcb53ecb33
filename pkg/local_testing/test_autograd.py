import unittest
import sys
import os

import numpy as np

# Add the source directory to the Python path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src')))

from autograd import Graph, Parameter, backward, forward, zero_grad
from errors import GraphError, StateError
from nnops import ConvSpec, PoolSpec
from similarity import DepthMap, SimilaritySpec


class TestGraph(unittest.TestCase):
    def _shared_weight_graph(self):
        spec = ConvSpec(1, 1, 1, 1, has_bias=False)
        weight = Parameter('w', np.full((1, 1, 1, 1), 2.0))
        g = Graph()
        x = g.input('x')
        w = g.param(weight)
        a = g.conv(x, w, None, spec)
        b = g.conv(x, g.param(weight), None, spec)
        loss = g.dot(g.add(a, b), np.ones((1, 2, 2)))
        return g, loss, weight

    def test_shared_parameter_accumulates(self):
        g, loss, weight = self._shared_weight_graph()
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        forward(g, {'x': x})
        self.assertEqual(float(loss.value), 40.0)
        backward(g, loss)
        self.assertEqual(float(weight.grad.reshape(-1)[0]), 20.0)
        np.testing.assert_array_equal(g.input_grads['x'], np.full((1, 2, 2), 4.0))

    def test_gradients_accumulate_until_zeroed(self):
        g, loss, weight = self._shared_weight_graph()
        g.forward({'x': np.ones((1, 2, 2))})
        g.backward(loss)
        g.backward(loss)
        self.assertEqual(float(weight.grad.reshape(-1)[0]), 16.0)
        zero_grad([weight])
        zero_grad([weight])
        self.assertFalse(np.any(weight.grad))

    def test_frozen_parameter_gets_no_gradient(self):
        spec = ConvSpec(1, 1, 1, 1, has_bias=False)
        weight = Parameter('w', np.ones((1, 1, 1, 1)), trainable=False)
        g = Graph()
        loss = g.dot(g.conv(g.input('x'), g.param(weight), None, spec), np.ones((1, 1, 1)))
        g.forward({'x': np.full((1, 1, 1), 3.0)})
        g.backward(loss)
        self.assertFalse(np.any(weight.grad))

    def test_backward_before_forward(self):
        g, loss, _ = self._shared_weight_graph()
        with self.assertRaises(StateError):
            g.backward(loss)

    def test_missing_feed(self):
        g, _, _ = self._shared_weight_graph()
        with self.assertRaises(GraphError):
            g.forward({})

    def test_cycle_is_rejected(self):
        g = Graph()
        x = g.input('x')
        y = g.relu(x)
        g.relu(y)
        g.nodes[1].inputs = (2,)
        with self.assertRaises(GraphError):
            g.topological_order()

    def test_foreign_node_is_rejected(self):
        other = Graph()
        stray = other.relu(other.input('x'))
        g = Graph()
        g.input('x')
        with self.assertRaises(GraphError):
            g.relu(stray)

    def test_non_scalar_loss(self):
        g = Graph()
        y = g.relu(g.input('x'))
        g.forward({'x': np.ones((1, 2, 2))})
        with self.assertRaises(GraphError):
            g.backward(y)

    def test_parameter_keeps_private_copy(self):
        source = np.ones((2,))
        parameter = Parameter('p', source)
        source[0] = 5.0
        self.assertEqual(float(parameter.value[0]), 1.0)


class TestLayerGradients(unittest.TestCase):
    def test_relu_and_maxpool_pattern(self):
        g = Graph()
        pooled = g.maxpool(g.relu(g.input('x')), PoolSpec())
        loss = g.dot(pooled, np.ones((1, 1, 1)))
        g.forward({'x': np.array([[[-1.0, 2.0], [3.0, -4.0]]])})
        g.backward(loss)
        np.testing.assert_array_equal(g.input_grads['x'], [[[0.0, 0.0], [1.0, 0.0]]])
        self.assertEqual(len(g.activation_pattern()), 2)

    def test_activation_pattern_needs_forward(self):
        g = Graph()
        g.relu(g.input('x'))
        with self.assertRaises(StateError):
            g.activation_pattern()

    def test_depth_conv_matches_constant_one_graph(self):
        rng = np.random.default_rng(0)
        spec = ConvSpec(2, 2, padding=1)
        weight = Parameter('w', rng.normal(size=spec.weight_shape))
        bias = Parameter('b', rng.normal(size=2))
        x = rng.normal(size=(2, 4, 4))
        depth = DepthMap.from_meters(rng.uniform(1.0, 3.0, (4, 4)))
        direction = rng.normal(size=(2, 4, 4))

        grads = []
        for sim in (None, SimilaritySpec.constant_one()):
            zero_grad([weight, bias])
            g = Graph()
            out = g.conv(g.input('x'), g.param(weight), g.param(bias), spec, depth if sim else None, sim)
            loss = g.dot(out, direction)
            g.forward({'x': x})
            g.backward(loss)
            grads.append((weight.grad.copy(), bias.grad.copy(), g.input_grads['x']))
        for standard, aware in zip(*grads):
            np.testing.assert_array_equal(standard, aware)

    def test_replay_gives_identical_gradients(self):
        rng = np.random.default_rng(9)
        spec = ConvSpec(2, 3, padding=1)
        weight = Parameter('w', rng.normal(size=spec.weight_shape))
        bias = Parameter('b', rng.normal(size=3))
        depth = DepthMap.from_meters(rng.uniform(1.0, 3.0, (6, 6)))
        sim = SimilaritySpec.exponential()
        g = Graph()
        hidden = g.relu(g.conv(g.input('x'), g.param(weight), g.param(bias), spec, depth, sim))
        pooled = g.avgpool(hidden, PoolSpec(mode='depth_avg'), depth, sim)
        loss = g.dot(pooled, rng.normal(size=(3, 3, 3)))
        x = rng.normal(size=(2, 6, 6))

        runs = []
        for _ in range(2):
            zero_grad([weight, bias])
            g.forward({'x': x})
            g.backward(loss)
            runs.append([weight.grad.tobytes(), bias.grad.tobytes(), g.input_grads['x'].tobytes(),
                         np.asarray(loss.value).tobytes()])
        self.assertEqual(runs[0], runs[1])

    def test_cross_entropy_gradient_reaches_input(self):
        g = Graph()
        loss = g.cross_entropy(g.input('logits'), np.array([[0, 1]]))
        g.forward({'logits': np.zeros((2, 1, 2))})
        g.backward(loss)
        np.testing.assert_allclose(g.input_grads['logits'][:, 0, 0], [-0.25, 0.25])

    def test_avgpool_and_global_concat(self):
        g = Graph()
        pooled = g.avgpool(g.input('x'), PoolSpec(mode='avg'))
        up = g.upsample(g.global_concat(pooled), 2, 2)
        loss = g.dot(up, np.ones((2, 2, 2)))
        g.forward({'x': np.arange(4.0).reshape(1, 2, 2)})
        self.assertAlmostEqual(float(loss.value), 8 * 1.5)
        g.backward(loss)
        np.testing.assert_allclose(g.input_grads['x'], np.full((1, 2, 2), 2.0))


if __name__ == '__main__':
    unittest.main()

import unittest
import os
import sys

import numpy as np

# Add the source directory to the Python path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src')))

from bench import BenchConfig, bench_config
from data import DatasetSpec, derived_seed, generate
from nnops import (ConvKernel, ConvSpec, PoolSpec, avg_pool_backward, avg_pool_forward, conv_backward,
                   conv_forward, depth_avg_pool_backward, depth_avg_pool_forward, depth_conv_backward,
                   depth_conv_forward)
from rf_trace import fresh_levels, rf_trace
from similarity import DepthMap, SimilaritySpec
from tensor_core import Rng
from train import TrainConfig, compare

RUN_SLOW = os.environ.get('DCNN_RUN_SLOW') == '1'


class TestReductionEquivalence(unittest.TestCase):
    """Depth-aware ops collapse to their standard versions when depth carries no information"""

    def test_random_configurations(self):
        root = Rng(2024)
        for trial in range(100):
            rng = root.spawn(trial)
            kernel = int((1, 3, 5)[int(rng.integers(0, 3))])
            dilation = int(rng.integers(1, 3))
            padding = int(rng.integers(0, dilation * (kernel // 2) + 1))
            size = int(rng.integers(dilation * (kernel - 1) + 1, 17))
            spec = ConvSpec(int(rng.integers(1, 9)), int(rng.integers(1, 9)), kernel, kernel,
                            int(rng.integers(1, 3)), padding, dilation)
            x = rng.normal(0.0, 1.0, (spec.in_channels, size, size))
            weights = ConvKernel(rng.normal(0.0, 1.0, spec.weight_shape), rng.normal(0.0, 1.0, spec.out_channels))
            flat = DepthMap.constant(size, size, float(rng.uniform(0.5, 5.0)))
            varied = DepthMap.from_meters(rng.uniform(0.5, 5.0, (size, size)))
            standard = conv_forward(spec, weights, x).tobytes()
            with self.subTest(trial=trial, spec=spec):
                self.assertEqual(depth_conv_forward(spec, weights, x, flat, SimilaritySpec.exponential()).tobytes(),
                                 standard)
                self.assertEqual(depth_conv_forward(spec, weights, x, varied, SimilaritySpec.constant_one()).tobytes(),
                                 standard)

            pool_kernel = int(rng.integers(2, 4))
            pool = PoolSpec(pool_kernel, pool_kernel, int(rng.integers(1, 3)), int(rng.integers(0, pool_kernel // 2 + 1)),
                            'avg')
            if size < pool_kernel:
                continue
            with self.subTest(trial=trial, pool=pool):
                self.assertEqual(depth_avg_pool_forward(pool, x, flat, SimilaritySpec.clip()).tobytes(),
                                 avg_pool_forward(pool, x).tobytes())

    def test_random_gradients(self):
        root = Rng(2025)
        for trial in range(50):
            rng = root.spawn(trial)
            kernel = int((1, 3, 5)[int(rng.integers(0, 3))])
            dilation = int(rng.integers(1, 3))
            padding = int(rng.integers(0, dilation * (kernel // 2) + 1))
            size = int(rng.integers(dilation * (kernel - 1) + 1, 13))
            spec = ConvSpec(int(rng.integers(1, 6)), int(rng.integers(1, 6)), kernel, kernel,
                            int(rng.integers(1, 3)), padding, dilation)
            x = rng.normal(0.0, 1.0, (spec.in_channels, size, size))
            weights = ConvKernel(rng.normal(0.0, 1.0, spec.weight_shape), rng.normal(0.0, 1.0, spec.out_channels))
            flat = DepthMap.constant(size, size, float(rng.uniform(0.5, 5.0)))
            varied = DepthMap.from_meters(rng.uniform(0.5, 5.0, (size, size)))
            grad_y = rng.normal(0.0, 1.0, conv_forward(spec, weights, x).shape)
            standard = [g.tobytes() for g in conv_backward(spec, weights, x, grad_y)]
            with self.subTest(trial=trial, spec=spec):
                for depth, sim in ((flat, SimilaritySpec.exponential()), (varied, SimilaritySpec.constant_one())):
                    grads = depth_conv_backward(spec, weights, x, depth, sim, grad_y)
                    self.assertEqual([g.tobytes() for g in grads], standard)

            pool_kernel = int(rng.integers(2, 4))
            pool = PoolSpec(pool_kernel, pool_kernel, int(rng.integers(1, 3)), int(rng.integers(0, pool_kernel // 2 + 1)),
                            'avg')
            if size < pool_kernel:
                continue
            grad_pool = rng.normal(0.0, 1.0, avg_pool_forward(pool, x).shape)
            with self.subTest(trial=trial, pool=pool):
                self.assertEqual(depth_avg_pool_backward(pool, x, flat, SimilaritySpec.exponential(), grad_pool).tobytes(),
                                 avg_pool_backward(pool, x, grad_pool).tobytes())


class TestReceptiveField(unittest.TestCase):
    def test_three_levels_favour_own_region(self):
        values = np.full((15, 15), 1.0)
        values[:, 7:] = 4.0
        depth = DepthMap.from_meters(values)
        trace = rf_trace(depth, (7, 5), fresh_levels(3, SimilaritySpec.exponential()))
        split = trace.region_split(depth)
        self.assertGreater(split['same_region'], split['other_region'])


@unittest.skipUnless(RUN_SLOW, 'set DCNN_RUN_SLOW=1 for desk-scale acceptance runs')
class TestDeskScale(unittest.TestCase):
    def test_runtime_overhead(self):
        row = bench_config(BenchConfig(64, 64, 128, 3), reps=20)
        self.assertLessEqual(row.ratio, 2.0)

    def test_segmentation_benefit(self):
        spec = DatasetSpec(num_images=200, height=64, width=64, num_classes=4, seed=42)
        train_scenes = generate(spec)
        test_scenes = generate(DatasetSpec(num_images=50, height=64, width=64, num_classes=4,
                                           seed=derived_seed(42, 'test')))
        config = TrainConfig(max_iter=20 * len(train_scenes), log_every=0)
        sims = [SimilaritySpec.exponential(alpha) for alpha in (8.3, 2.5, 20.0)]
        rows = compare(train_scenes, test_scenes, ['baseline-mini', 'dcnn-mini'], sims, [1, 2, 3], config, 4)

        baseline = {r.seed: r for r in rows if r.preset == 'baseline-mini'}
        default = [r for r in rows if r.preset == 'dcnn-mini' and r.alpha == 8.3]
        wins = sum(1 for r in default if r.report.miou - baseline[r.seed].report.miou >= 0.05)
        self.assertGreaterEqual(wins, 2)
        self.assertLess(np.mean([r.final_epoch_loss for r in default]),
                        np.mean([r.final_epoch_loss for r in baseline.values()]))
        baseline_miou = np.mean([r.report.miou for r in baseline.values()])
        for alpha in (2.5, 20.0):
            runs = [r.report.miou for r in rows if r.preset == 'dcnn-mini' and r.alpha == alpha]
            self.assertGreater(np.mean(runs), baseline_miou, alpha)


if __name__ == '__main__':
    unittest.main()

import unittest
import os
import sys
import tempfile

import numpy as np

# Add the source directory to the Python path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src')))

from data import (DatasetSpec, build_pyramid, decode_pgm16_depth, decode_pgm8_labels, decode_ppm_rgb,
                  derived_seed, encode_pgm16_depth, encode_pgm8_labels, encode_ppm_rgb, generate,
                  infer_num_classes, label_information, read_dataset, write_dataset, write_pgm16_depth)
from errors import DataError, DatasetIOError, FormatError, SpecError
from metrics import depth_variance_report
from similarity import DepthMap

SMALL = DatasetSpec(num_images=6, height=24, width=24, num_classes=4, seed=5)


class TestGeneration(unittest.TestCase):
    def test_determinism(self):
        a, b = generate(SMALL), generate(SMALL)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.rgb, y.rgb)
            np.testing.assert_array_equal(x.depth.values, y.depth.values)
            np.testing.assert_array_equal(x.labels, y.labels)

    def test_different_seed_differs(self):
        a = generate(SMALL)[0]
        b = generate(DatasetSpec(num_images=6, height=24, width=24, seed=6))[0]
        self.assertFalse(np.array_equal(a.rgb, b.rgb))

    def test_scene_contents(self):
        for scene in generate(SMALL):
            self.assertEqual(scene.rgb.shape, (3, 24, 24))
            self.assertTrue(np.all((scene.rgb >= 0) & (scene.rgb <= 1)))
            self.assertTrue(np.all(scene.depth.valid))
            self.assertTrue(set(np.unique(scene.labels)) <= {0, 1, 2, 3})

    def test_noise_free_class_depth_is_constant(self):
        report = depth_variance_report(generate(SMALL), num_classes=4)
        for cls, variance in report.per_class.items():
            if variance is not None:
                self.assertAlmostEqual(variance, 0.0, places=12, msg=cls)
                self.assertLess(variance, report.all)
        self.assertGreater(report.all, 0.0)

    def test_holes(self):
        scenes = generate(DatasetSpec(num_images=2, height=8, width=8, hole_prob=1.0))
        for scene in scenes:
            self.assertFalse(np.any(scene.depth.valid))

    def test_ambiguous_pair_is_separated_by_depth(self):
        scenes = generate(DatasetSpec(num_images=20, height=32, width=32, seed=11))
        info = label_information(scenes, (1, 2))
        self.assertGreater(info['depth'], info['color'])

    def test_invalid_specs(self):
        with self.assertRaises(SpecError):
            DatasetSpec(num_images=0)
        with self.assertRaises(SpecError):
            DatasetSpec(hole_prob=1.5)
        with self.assertRaises(SpecError):
            DatasetSpec(depth_near=3.0, depth_far=2.0)

    def test_derived_seed_is_stable(self):
        self.assertEqual(derived_seed(42, 'test'), derived_seed(42, 'test'))
        self.assertNotEqual(derived_seed(42, 'test'), 42)


class TestPyramid(unittest.TestCase):
    def test_top_left_rule(self):
        pyramid = build_pyramid(DepthMap.from_meters([[1.0, 2.0], [3.0, 4.0]]), 1)
        np.testing.assert_array_equal(pyramid[1].values, [[1.0]])

    def test_constant_depth(self):
        pyramid = build_pyramid(DepthMap.constant(8, 8, 2.5), 3)
        self.assertEqual(len(pyramid), 4)
        for level in pyramid:
            self.assertTrue(np.all(level.values == 2.5))

    def test_ceil_sizes(self):
        pyramid = build_pyramid(DepthMap.constant(7, 5, 1.0), 2)
        self.assertEqual([level.shape for level in pyramid], [(7, 5), (4, 3), (2, 2)])

    def test_holes_follow_samples(self):
        depth = DepthMap.from_meters([[float('nan'), 1.0], [1.0, 1.0]])
        self.assertFalse(build_pyramid(depth, 1)[1].valid[0, 0])


class TestCodecs(unittest.TestCase):
    def test_depth_millimeters(self):
        blob = encode_pgm16_depth(DepthMap.from_meters([[1.234]]))
        self.assertEqual(blob[-2:], (1234).to_bytes(2, 'big'))
        self.assertAlmostEqual(float(decode_pgm16_depth(blob).values[0, 0]), 1.234, places=12)

    def test_zero_reads_as_missing(self):
        blob = b'P5\n2 1\n65535\n' + (0).to_bytes(2, 'big') + (500).to_bytes(2, 'big')
        depth = decode_pgm16_depth(blob)
        np.testing.assert_array_equal(depth.valid, [[False, True]])
        self.assertEqual(float(depth.values[0, 1]), 0.5)

    def test_scene_round_trip(self):
        scene = generate(DatasetSpec(num_images=1, height=9, width=7, hole_prob=0.2, seed=3))[0]
        rgb = decode_ppm_rgb(encode_ppm_rgb(scene.rgb))
        depth = decode_pgm16_depth(encode_pgm16_depth(scene.depth))
        labels = decode_pgm8_labels(encode_pgm8_labels(scene.labels))
        np.testing.assert_allclose(rgb, scene.rgb, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(depth.valid, scene.depth.valid)
        np.testing.assert_allclose(depth.values, scene.depth.values, rtol=0, atol=1e-9)
        np.testing.assert_array_equal(labels, scene.labels)

    def test_header_comments(self):
        labels = decode_pgm8_labels(b'P5\n# comment\n2 1\n255\n\x01\xff')
        np.testing.assert_array_equal(labels, [[1, 255]])

    def test_bad_magic(self):
        with self.assertRaises(FormatError) as ctx:
            decode_ppm_rgb(b'P5\n1 1\n255\n\x00')
        self.assertEqual(ctx.exception.offset, 0)

    def test_truncated_payload(self):
        blob = b'P5\n2 2\n255\n\x00\x01\x02'
        with self.assertRaises(FormatError) as ctx:
            decode_pgm8_labels(blob)
        self.assertEqual(ctx.exception.offset, len(blob))

    def test_trailing_bytes(self):
        with self.assertRaises(FormatError) as ctx:
            decode_pgm8_labels(b'P5\n1 1\n255\n\x00\x00')
        self.assertEqual(ctx.exception.offset, 12)

    def test_wrong_maxval(self):
        with self.assertRaises(FormatError):
            decode_pgm16_depth(b'P5\n1 1\n255\n\x00')

    def test_non_numeric_header(self):
        with self.assertRaises(FormatError) as ctx:
            decode_pgm8_labels(b'P5\nab 1\n255\n\x00')
        self.assertEqual(ctx.exception.offset, 3)


class TestDatasetFiles(unittest.TestCase):
    def test_write_and_read(self):
        scenes = generate(DatasetSpec(num_images=3, height=8, width=8, seed=2))
        with tempfile.TemporaryDirectory() as tmp:
            write_dataset(tmp, scenes)
            self.assertEqual(len(os.listdir(os.path.join(tmp, 'rgb'))), 3)
            self.assertEqual(len(os.listdir(os.path.join(tmp, 'depth'))), 3)
            self.assertEqual(len(os.listdir(os.path.join(tmp, 'label'))), 3)
            loaded = read_dataset(tmp)
        self.assertEqual(len(loaded), 3)
        for original, restored in zip(scenes, loaded):
            np.testing.assert_array_equal(original.labels, restored.labels)
        self.assertEqual(infer_num_classes(loaded), int(max(s.labels.max() for s in scenes)) + 1)

    def test_resolution_mismatch(self):
        scenes = generate(DatasetSpec(num_images=2, height=8, width=8, seed=2))
        with tempfile.TemporaryDirectory() as tmp:
            write_dataset(tmp, scenes)
            bad_path = os.path.join(tmp, 'depth', '000001.pgm')
            write_pgm16_depth(bad_path, DepthMap.constant(6, 6, 1.0))
            with self.assertRaises(DataError) as ctx:
                read_dataset(tmp)
        self.assertIn(bad_path, ctx.exception.message)
        self.assertEqual(ctx.exception.exit_code, 3)

    def test_missing_directory(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(DatasetIOError) as ctx:
                read_dataset(os.path.join(tmp, 'absent'))
        self.assertIn('absent', ctx.exception.path)


if __name__ == '__main__':
    unittest.main()

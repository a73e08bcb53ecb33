import unittest
import os
import struct
import sys
import tempfile

import numpy as np

# Add the source directory to the Python path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src')))

from data import build_pyramid
from errors import DatasetIOError, FormatError, SpecError
from model import (PRESETS, LayerSpec, ModelSpec, build, decode_checkpoint, encode_checkpoint, load_checkpoint,
                   parameter_count, preset_spec, save_checkpoint, validate_spec, with_similarity)
from nnops import ConvSpec
from similarity import DepthMap, SimilaritySpec
from tensor_core import Rng

SIZE = 16


def _inputs(seed=0, size=SIZE):
    rng = np.random.default_rng(seed)
    rgb = rng.uniform(0.0, 1.0, (3, size, size))
    depth = DepthMap.from_meters(rng.uniform(0.5, 6.0, (size, size)))
    return rgb, build_pyramid(depth, 2)


class TestModelSpec(unittest.TestCase):
    def test_presets_validate(self):
        for preset in PRESETS:
            validate_spec(preset_spec(preset, num_classes=5))

    def test_depth_awareness_adds_no_parameters(self):
        counts = {preset: parameter_count(preset_spec(preset)) for preset in PRESETS}
        self.assertEqual(len(set(counts.values())), 1, counts)

    def test_conv_parameter_count(self):
        self.assertEqual(ConvSpec(3, 64).parameter_count, 1792)
        plain = LayerSpec('conv', 'c', conv=ConvSpec(3, 64))
        aware = LayerSpec('dconv', 'd', conv=ConvSpec(3, 64), similarity=SimilaritySpec.exponential())
        self.assertEqual(plain.parameter_count, aware.parameter_count)

    def test_empty_and_classifier_only(self):
        self.assertEqual(parameter_count(ModelSpec((), 1)), 0)
        head = LayerSpec('classifier_1x1', 'classifier', conv=ConvSpec(8, 3, 1, 1))
        self.assertEqual(parameter_count(ModelSpec((head,), 3)), 8 * 3 + 3)

    def test_built_model_count_matches_spec(self):
        spec = preset_spec('dcnn-mini')
        self.assertEqual(parameter_count(build(spec, Rng(1))), parameter_count(spec))

    def test_depth_aware_layers_per_preset(self):
        aware = {preset: [l.name for l in preset_spec(preset).layers if l.depth_aware] for preset in PRESETS}
        self.assertEqual(aware['baseline-mini'], [])
        self.assertEqual(aware['dcnn-mini'], ['conv1_1', 'conv2_1', 'conv3_1', 'pool3', 'conv6'])
        self.assertEqual(aware['dcnn-late-mini'], ['conv2_1', 'conv3_1', 'pool3', 'conv6'])
        self.assertEqual(aware['dcnn-conv-only-mini'], ['conv1_1', 'conv2_1', 'conv3_1', 'conv6'])

    def test_unknown_preset(self):
        with self.assertRaises(SpecError):
            preset_spec('resnet')

    def test_depth_aware_layer_needs_similarity(self):
        with self.assertRaises(SpecError):
            LayerSpec('dconv', 'd', conv=ConvSpec(3, 8))

    def test_channel_chain_is_checked(self):
        layers = (LayerSpec('conv', 'a', conv=ConvSpec(3, 8)), LayerSpec('conv', 'b', conv=ConvSpec(4, 2)))
        with self.assertRaises(SpecError):
            validate_spec(ModelSpec(layers, 2))

    def test_depth_level_must_match_resolution(self):
        layers = (LayerSpec('dconv', 'a', conv=ConvSpec(3, 2, padding=1), similarity=SimilaritySpec.exponential(),
                            depth_level=1),)
        with self.assertRaises(SpecError):
            validate_spec(ModelSpec(layers, 2))

    def test_with_similarity_rewrites_depth_aware_layers(self):
        spec = with_similarity(preset_spec('dcnn-mini'), SimilaritySpec.clip(0.5))
        sims = {l.similarity for l in spec.layers if l.depth_aware}
        self.assertEqual(sims, {SimilaritySpec.clip(0.5)})


class TestModelForward(unittest.TestCase):
    def test_same_seed_same_parameters(self):
        a = build(preset_spec('dcnn-mini'), Rng(3)).state_dict()
        b = build(preset_spec('dcnn-mini'), Rng(3)).state_dict()
        self.assertEqual(list(a), list(b))
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_initialization_bounds(self):
        model = build(preset_spec('baseline-mini'), Rng(4))
        weight = model.params['conv1_1.weight'].value
        bound = np.sqrt(6.0 / 27)
        self.assertTrue(np.all(np.abs(weight) <= bound))
        self.assertFalse(np.any(model.params['conv1_1.bias'].value))

    def test_output_shape(self):
        rgb, pyramid = _inputs()
        logits = build(preset_spec('dcnn-mini', num_classes=5), Rng(0)).forward_segmentation(rgb, pyramid)
        self.assertEqual(logits.shape, (5, SIZE, SIZE))
        self.assertTrue(np.all(np.isfinite(logits)))

    def test_odd_resolution(self):
        rgb, pyramid = _inputs(size=15)
        logits = build(preset_spec('dcnn-mini'), Rng(0)).forward_segmentation(rgb, pyramid)
        self.assertEqual(logits.shape, (4, 15, 15))

    def test_constant_one_matches_baseline(self):
        rgb, pyramid = _inputs(1)
        baseline = build(preset_spec('baseline-mini'), Rng(9))
        reduced = build(preset_spec('dcnn-mini', sim=SimilaritySpec.constant_one()), Rng(9))
        self.assertEqual(baseline.forward_segmentation(rgb, pyramid).tobytes(),
                         reduced.forward_segmentation(rgb, pyramid).tobytes())

    def test_missing_depth_falls_back_to_baseline(self):
        rgb, _ = _inputs(4)
        holes = build_pyramid(DepthMap.from_meters(np.full((SIZE, SIZE), np.nan)), 2)
        baseline = build(preset_spec('baseline-mini'), Rng(2)).forward_segmentation(rgb, holes)
        aware = build(preset_spec('dcnn-mini'), Rng(2)).forward_segmentation(rgb, holes)
        np.testing.assert_allclose(aware, baseline, rtol=0, atol=1e-12)

    def test_classifier_permutation_permutes_logits(self):
        rgb, pyramid = _inputs(2)
        model = build(preset_spec('dcnn-mini', num_classes=3), Rng(5))
        model.params['classifier.bias'].value[:] = [0.1, -0.2, 0.3]
        before = model.forward_segmentation(rgb, pyramid)
        order = [2, 0, 1]
        for name in ('classifier.weight', 'classifier.bias'):
            model.params[name].value = model.params[name].value[order].copy()
        after = model.forward_segmentation(rgb, pyramid)
        np.testing.assert_allclose(after, before[order], rtol=0, atol=1e-12)

    def test_zero_parameters_give_uniform_logits(self):
        rgb, pyramid = _inputs(3)
        model = build(preset_spec('dcnn-mini'), Rng(6))
        for parameter in model.parameters():
            parameter.value[:] = 0.0
        logits = model.forward_segmentation(rgb, pyramid)
        self.assertFalse(np.any(logits))

    def test_missing_pyramid_level(self):
        rgb, pyramid = _inputs()
        model = build(preset_spec('dcnn-mini'), Rng(0))
        with self.assertRaises(SpecError):
            model.forward_segmentation(rgb, [pyramid[0]])

    def test_baseline_ignores_pyramid(self):
        rgb, _ = _inputs()
        logits = build(preset_spec('baseline-mini'), Rng(0)).forward_segmentation(rgb, [])
        self.assertEqual(logits.shape, (4, SIZE, SIZE))


class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self.model = build(preset_spec('dcnn-late-mini', num_classes=3), Rng(8))

    def test_round_trip(self):
        state = decode_checkpoint(encode_checkpoint(self.model.state_dict()))
        fresh = build(preset_spec('dcnn-late-mini', num_classes=3), Rng(99))
        fresh.load_state_dict(state)
        for name, value in self.model.state_dict().items():
            np.testing.assert_array_equal(fresh.params[name].value, value)

    def test_file_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'model.dcnn')
            save_checkpoint(path, self.model)
            state = load_checkpoint(path)
        self.assertEqual(sorted(state), sorted(self.model.params))

    def test_bad_magic(self):
        blob = b'XXXX' + encode_checkpoint(self.model.state_dict())[4:]
        with self.assertRaises(FormatError) as ctx:
            decode_checkpoint(blob)
        self.assertEqual(ctx.exception.offset, 0)

    def test_truncated(self):
        blob = encode_checkpoint(self.model.state_dict())
        with self.assertRaises(FormatError) as ctx:
            decode_checkpoint(blob[:-3])
        self.assertLess(ctx.exception.offset, len(blob))

    def test_oversized_dims(self):
        blob = (b'DCNN' + struct.pack('<II', 1, 1) + struct.pack('<I', 1) + b'w' + struct.pack('<I', 2)
                + struct.pack('<2Q', 2 ** 32, 2 ** 32))
        with self.assertRaises(FormatError) as ctx:
            decode_checkpoint(blob)
        self.assertEqual(ctx.exception.offset, len(blob))
        self.assertEqual(ctx.exception.exit_code, 3)

    def test_trailing_bytes(self):
        blob = encode_checkpoint(self.model.state_dict())
        with self.assertRaises(FormatError) as ctx:
            decode_checkpoint(blob + b'\0')
        self.assertEqual(ctx.exception.offset, len(blob))

    def test_state_mismatch(self):
        state = self.model.state_dict()
        state.pop('conv6.bias')
        with self.assertRaises(SpecError):
            self.model.load_state_dict(state)

    def test_missing_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(DatasetIOError):
                load_checkpoint(os.path.join(tmp, 'absent.dcnn'))


if __name__ == '__main__':
    unittest.main()

import unittest
import contextlib
import io
import json
import os
import sys
import tempfile

# Add the source directory to the Python path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src')))

from cli import main

RUN_SLOW = os.environ.get('DCNN_RUN_SLOW') == '1'


def run_cli(*argv):
    """Run the CLI in-process, returning (exit code, stdout)"""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(['--log-level', 'ERROR'] + [str(a) for a in argv])
    return code, out.getvalue()


class TestExitCodes(unittest.TestCase):
    def test_help(self):
        self.assertEqual(run_cli('--help')[0], 0)

    def test_bad_flag(self):
        self.assertEqual(run_cli('train', '--bogus')[0], 2)

    def test_missing_subcommand(self):
        self.assertEqual(run_cli()[0], 2)

    def test_bad_argument_value(self):
        self.assertEqual(run_cli('gen-data', '--out', 'unused', '--size', '0x4')[0], 2)

    def test_missing_dataset(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, _ = run_cli('train', '--data', os.path.join(tmp, 'absent'), '--out', tmp)
        self.assertEqual(code, 3)

    def test_bench_ratio_gate(self):
        code, out = run_cli('bench', '--sizes', '6', '--channels', '1', '--reps', '2', '--quick',
                            '--max-ratio', '1e-9')
        self.assertEqual(code, 4)
        self.assertTrue(out.startswith('config,standard_ns'))

    def test_dump_config(self):
        code, out = run_cli('--dump-config', 'gradcheck', '--target', 'relu')
        self.assertEqual(code, 0)
        payload = json.loads(out)
        self.assertEqual(payload['resolved']['target'], 'relu')
        self.assertIn('alpha', payload['defaults'])


class TestWorkflows(unittest.TestCase):
    def test_gradcheck(self):
        code, out = run_cli('gradcheck', '--target', 'avgpool', '--instances', '2', '--samples', '2')
        self.assertEqual(code, 0)
        self.assertTrue(json.loads(out)['passed'])

    def test_gen_train_eval(self):
        with tempfile.TemporaryDirectory() as tmp:
            data, run = os.path.join(tmp, 'data'), os.path.join(tmp, 'run')
            code, _ = run_cli('gen-data', '--out', data, '--images', 3, '--test-images', 2, '--size', 12,
                              '--classes', 3, '--seed', 4)
            self.assertEqual(code, 0)

            code, out = run_cli('train', '--data', data, '--out', run, '--iters', 2, '--classes', 3,
                                '--log-every', 0)
            self.assertEqual(code, 0)
            summary = json.loads(out)
            self.assertTrue(os.path.exists(summary['checkpoint']))
            self.assertTrue(os.path.exists(summary['loss_csv']))

            metrics_path = os.path.join(tmp, 'metrics.json')
            code, out = run_cli('eval', '--data', os.path.join(data, 'test'), '--checkpoint', summary['checkpoint'],
                                '--out', metrics_path)
            self.assertEqual(code, 0)
            report = json.loads(out)
            self.assertGreaterEqual(report['miou'], 0.0)
            with open(metrics_path) as f:
                self.assertEqual(json.load(f)['pixels'], report['pixels'])

            code, out = run_cli('depth-variance', '--data', data, '--classes', 3)
            self.assertEqual(code, 0)
            self.assertIn('per_class', json.loads(out))

    def _dataset(self, tmp, images=3, size=12):
        data = os.path.join(tmp, 'data')
        code, _ = run_cli('gen-data', '--out', data, '--images', images, '--size', size, '--classes', 3, '--seed', 4)
        self.assertEqual(code, 0)
        return data

    def _loss_csv(self, data, out, *flags):
        code, out = run_cli('train', '--data', data, '--out', out, '--iters', 2, '--classes', 3, '--log-every', 0,
                            *flags)
        self.assertEqual(code, 0)
        with open(json.loads(out)['loss_csv']) as f:
            return f.read()

    def test_gen_data_layout(self):
        with tempfile.TemporaryDirectory() as tmp:
            data = self._dataset(tmp, images=2)
            for sub, ext in (('rgb', 'ppm'), ('depth', 'pgm'), ('label', 'pgm')):
                self.assertEqual(sorted(os.listdir(os.path.join(data, sub))), [f"000000.{ext}", f"000001.{ext}"])
            with open(os.path.join(data, 'manifest.txt')) as f:
                self.assertEqual(f.read(), '0\n1\n')

    def test_alpha_reaches_training(self):
        with tempfile.TemporaryDirectory() as tmp:
            data = self._dataset(tmp)
            soft = self._loss_csv(data, os.path.join(tmp, 'soft'), '--alpha', 2.5)
            sharp = self._loss_csv(data, os.path.join(tmp, 'sharp'), '--alpha', 20)
        self.assertNotEqual(soft, sharp)

    def test_constant_similarity_matches_baseline(self):
        with tempfile.TemporaryDirectory() as tmp:
            data = self._dataset(tmp)
            aware = self._loss_csv(data, os.path.join(tmp, 'aware'), '--preset', 'dcnn-mini', '--sim', 'one')
            baseline = self._loss_csv(data, os.path.join(tmp, 'baseline'), '--preset', 'baseline-mini')
        self.assertEqual(aware, baseline)

    def test_depth_variance_resolution_mismatch(self):
        from data import write_pgm16_depth
        from similarity import DepthMap
        with tempfile.TemporaryDirectory() as tmp:
            data = self._dataset(tmp, images=2)
            write_pgm16_depth(os.path.join(data, 'depth', '000001.pgm'), DepthMap.constant(6, 6, 1.0))
            code, _ = run_cli('depth-variance', '--data', data, '--classes', 3)
        self.assertEqual(code, 3)

    def test_gradcheck_model_instances(self):
        code, out = run_cli('gradcheck', '--target', 'model', '--instances', 2, '--samples', 1)
        report = json.loads(out)
        self.assertEqual(report['instances'], 2)
        self.assertEqual(code, 0 if report['passed'] else 4)

    def test_rf_trace(self):
        from data import write_pgm16_depth
        from similarity import DepthMap
        with tempfile.TemporaryDirectory() as tmp:
            depth_path, heat_path = os.path.join(tmp, 'depth.pgm'), os.path.join(tmp, 'rf.pgm')
            write_pgm16_depth(depth_path, DepthMap.constant(9, 9, 2.0))
            code, out = run_cli('rf-trace', '--fresh', '--depth-file', depth_path, '--pixel', '4,4',
                                '--levels', 1, '--out', heat_path)
            self.assertEqual(code, 0)
            self.assertTrue(os.path.exists(heat_path))
        self.assertEqual(json.loads(out)['contributing_pixels'], 9)

    def test_rf_trace_bad_pixel(self):
        self.assertEqual(run_cli('rf-trace', '--fresh', '--depth-file', 'x.pgm', '--pixel', 'a', '--out', 'y')[0], 2)

    @unittest.skipUnless(RUN_SLOW, 'set DCNN_RUN_SLOW=1 for the compare workflow')
    def test_compare(self):
        with tempfile.TemporaryDirectory() as tmp:
            data = os.path.join(tmp, 'data')
            run_cli('gen-data', '--out', data, '--images', 4, '--test-images', 2, '--size', 16, '--classes', 3)
            out_csv, summary = os.path.join(tmp, 'compare.csv'), os.path.join(tmp, 'compare.json')
            code, out = run_cli('compare', '--data', data, '--sims', 'exp:8.3,one', '--seeds', '1,2',
                                '--iters', 3, '--classes', 3, '--log-every', 0, '--out', out_csv,
                                '--summary', summary)
            self.assertEqual(code, 0)
            self.assertIn('dcnn-mini/one', json.loads(out))
            self.assertTrue(os.path.exists(summary))


if __name__ == '__main__':
    unittest.main()

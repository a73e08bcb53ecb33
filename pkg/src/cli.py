"""
Depth-aware CNN toolkit - command line
One executable for every workflow: gen-data, train, eval, gradcheck, bench,
rf-trace, depth-variance and compare.

Exit codes: 0 success, 2 usage error, 3 data/format error,
4 numerical check failure, 1 unexpected error.
"""

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence

import bench
import gradcheck
import metrics
import train as trainer
from config import SETTINGS, configure_logging, dump_config
from data import (DatasetSpec, derived_seed, generate, infer_num_classes, read_dataset, read_pgm16_depth,
                  write_dataset)
from errors import ArgumentError, DatasetIOError, DcnnError, NumericalCheckError
from model import PRESETS, Model, build, load_checkpoint, parameter_count, preset_spec
from rf_trace import checkpoint_levels, fresh_levels, rf_trace, write_heatmap
from similarity import SimilaritySpec
from tensor_core import Rng

logger = logging.getLogger('cli')

SIM_CHOICES = ('exp', 'clip', 'one')


# ---------------------------------------------------------------------------
# argument helpers

def _parse_size(text: str) -> List[int]:
    parts = text.lower().split('x')
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise ArgumentError(f"bad size {text!r}; expected N or HxW")
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or min(dims) < 1:
        raise ArgumentError(f"bad size {text!r}; expected N or HxW")
    return dims


def _parse_pixel(text: str) -> List[int]:
    try:
        y, x = (int(p) for p in text.split(','))
    except ValueError:
        raise ArgumentError(f"bad pixel {text!r}; expected y,x")
    return [y, x]


def _parse_list(text: str, kind=str) -> List:
    try:
        return [kind(item.strip()) for item in text.split(',') if item.strip()]
    except ValueError:
        raise ArgumentError(f"bad list {text!r}")


def _sim(variant: str, alpha: Optional[float], threshold: Optional[float]) -> SimilaritySpec:
    if variant == 'exp':
        return SimilaritySpec.exponential(alpha)
    if variant == 'clip':
        return SimilaritySpec.clip(threshold)
    if variant == 'one':
        return SimilaritySpec.constant_one()
    raise ArgumentError(f"unknown similarity {variant!r}; choose from {SIM_CHOICES}")


def _sim_from_args(args) -> SimilaritySpec:
    return _sim(args.sim, args.alpha, args.clip_threshold)


def _parse_sims(text: str, threshold: Optional[float]) -> List[SimilaritySpec]:
    """'exp:8.3,exp:2.5,clip,one' -> similarity specs"""
    sims = []
    for item in _parse_list(text):
        variant, _, value = item.partition(':')
        try:
            number = float(value) if value else None
        except ValueError:
            raise ArgumentError(f"bad similarity {item!r}")
        sims.append(_sim(variant, number if variant == 'exp' else None,
                         number if variant == 'clip' else threshold))
    return sims


def _load_model(checkpoint: str, preset: str, sim: SimilaritySpec) -> Model:
    state = load_checkpoint(checkpoint)
    if 'classifier.weight' not in state:
        raise ArgumentError(f"{checkpoint} has no classifier.weight; not a segmentation checkpoint")
    model = build(preset_spec(preset, state['classifier.weight'].shape[0], sim), Rng(0))
    model.load_state_dict(state)
    return model


def _train_config(args, sim: Optional[SimilaritySpec], iterations: int) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        base_lr=args.lr, momentum=args.momentum, batch_size=args.batch_size, max_iter=iterations,
        lr_update_period=args.lr_period, power=args.power, lr_mode=args.lr_mode, seed=args.seed, sim=sim,
        augment_scale=args.augment_scale, augment_crop=args.augment_crop, augment_color=args.augment_color,
        scale_range=(args.scale_min, args.scale_max), color_jitter=args.color_jitter,
        checkpoint_every=getattr(args, 'checkpoint_every', 0), log_every=args.log_every,
        ignore_label=args.ignore_label)


def _iterations(args, num_scenes: int) -> int:
    if args.epochs is not None:
        if args.epochs < 1:
            raise ArgumentError(f"epochs must be >= 1, got {args.epochs}")
        return args.epochs * math.ceil(num_scenes / args.batch_size)
    return args.iters


def _write_json(path: str, payload: Dict[str, Any]) -> None:
    try:
        with open(path, 'w') as f:
            json.dump(payload, f, indent=2)
    except OSError as e:
        raise DatasetIOError(f"cannot write output ({e.strerror})", path)


# ---------------------------------------------------------------------------
# handlers: each returns a JSON-serialisable dict (or CSV text) for stdout

def handle_gen_data(args) -> Dict[str, Any]:
    height, width = _parse_size(args.size)
    spec = DatasetSpec(num_images=args.images, height=height, width=width, num_classes=args.classes,
                       shapes_per_image=args.shapes, ambiguous=args.ambiguous, noise_sigma=args.noise,
                       depth_noise_sigma=args.depth_noise, hole_prob=args.hole_prob, seed=args.seed)
    write_dataset(args.out, generate(spec))
    result = {'out': args.out, 'images': args.images, 'size': [height, width], 'classes': args.classes,
              'seed': args.seed}
    if args.test_images:
        test_spec = replace(spec, num_images=args.test_images, seed=derived_seed(args.seed, 'test'))
        write_dataset(os.path.join(args.out, 'test'), generate(test_spec))
        result['test_images'] = args.test_images
    return result


def handle_train(args) -> Dict[str, Any]:
    scenes = read_dataset(args.data)
    num_classes = args.classes or infer_num_classes(scenes, args.ignore_label)
    sim = _sim_from_args(args)
    model = build(preset_spec(args.preset, num_classes, sim), Rng(args.seed))
    config = _train_config(args, sim, _iterations(args, len(scenes)))
    result = trainer.train(model, scenes, config, args.out)
    return {
        'preset': args.preset,
        'sim': sim.describe(),
        'parameters': parameter_count(model),
        'iterations': config.max_iter,
        'final_epoch_loss': result.final_epoch_loss,
        'checkpoint': result.checkpoints[-1],
        'loss_csv': os.path.join(args.out, 'loss.csv'),
    }


def handle_eval(args) -> Dict[str, Any]:
    scenes = read_dataset(args.data)
    model = _load_model(args.checkpoint, args.preset, _sim_from_args(args))
    report = trainer.evaluate(model, scenes, args.ignore_label)
    if args.out:
        if args.format == 'csv':
            metrics.write_metrics_csv(args.out, report)
        else:
            metrics.write_metrics_json(args.out, report)
    return report.to_dict()


def handle_gradcheck(args) -> Dict[str, Any]:
    report = gradcheck.run(args.target, instances=args.instances, samples=args.samples, eps=args.eps,
                           seed=args.seed, tolerance=args.tolerance)
    return report.to_dict()


def handle_bench(args) -> str:
    configs = [bench.BenchConfig.parse(text) for text in (args.config or [])]
    sizes = args.sizes or ('' if configs else '128')
    configs += [bench.BenchConfig(args.channels, args.channels, size, args.kernel) for size in _parse_list(sizes, int)]
    rows = bench.run_bench(configs, args.reps, args.warmup, args.dtype, args.seed, quick=args.quick)
    if args.out:
        bench.write_bench_csv(args.out, rows)
    if args.max_ratio is not None:
        worst = max(row.ratio for row in rows)
        if worst > args.max_ratio:
            print(bench.bench_csv(rows), end='')
            raise NumericalCheckError(f"depth-aware/standard ratio {worst:.3f} exceeds {args.max_ratio}")
    return bench.bench_csv(rows)


def handle_rf_trace(args) -> Dict[str, Any]:
    pixel = tuple(_parse_pixel(args.pixel))
    sim = _sim_from_args(args)
    if args.levels < 1:
        raise ArgumentError(f"levels must be >= 1, got {args.levels}")
    depth = read_pgm16_depth(args.depth_file)
    if args.checkpoint:
        levels = checkpoint_levels(_load_model(args.checkpoint, args.preset, sim), args.levels)
    else:
        levels = fresh_levels(args.levels, sim)
    trace = rf_trace(depth, pixel, levels)
    write_heatmap(args.out, trace)
    result = {'out': args.out, 'pixel': list(trace.pixel), 'levels': trace.levels, 'sim': sim.describe(),
              'contributing_pixels': int((trace.weights > 0).sum())}
    if depth.valid[trace.pixel]:
        result.update(trace.region_split(depth))
    return result


def handle_depth_variance(args) -> Dict[str, Any]:
    report = metrics.depth_variance_report(read_dataset(args.data), args.classes, 1 if args.sample else 0,
                                           args.ignore_label)
    result = report.to_dict()
    if args.out:
        _write_json(args.out, result)
    return result


def handle_compare(args) -> Dict[str, Any]:
    train_scenes = read_dataset(args.data)
    test_scenes = read_dataset(args.test_data or os.path.join(args.data, 'test'))
    presets = _parse_list(args.presets)
    unknown = [p for p in presets if p not in PRESETS]
    if unknown:
        raise ArgumentError(f"unknown presets {unknown}; choose from {PRESETS}")
    sims = _parse_sims(args.sims, args.clip_threshold)
    config = _train_config(args, None, _iterations(args, len(train_scenes)))
    rows = trainer.compare(train_scenes, test_scenes, presets, sims, _parse_list(args.seeds, int), config,
                           args.classes)
    trainer.write_compare_outputs(args.out, args.summary, rows)
    return trainer.compare_summary(rows)


HANDLERS = {
    'gen-data': handle_gen_data,
    'train': handle_train,
    'eval': handle_eval,
    'gradcheck': handle_gradcheck,
    'bench': handle_bench,
    'rf-trace': handle_rf_trace,
    'depth-variance': handle_depth_variance,
    'compare': handle_compare,
}


# ---------------------------------------------------------------------------
# parser

def _add_sim_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--sim', choices=SIM_CHOICES, default='exp', help='depth similarity F_D')
    parser.add_argument('--alpha', type=float, default=SETTINGS['alpha'], help='exp similarity rate (1/m)')
    parser.add_argument('--clip-threshold', type=float, default=SETTINGS['clip_threshold'],
                        help='clip similarity threshold (m)')


def _add_train_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--iters', type=int, default=100)
    parser.add_argument('--epochs', type=int, help='overrides --iters with whole passes over the data')
    parser.add_argument('--lr', type=float, default=0.001)
    parser.add_argument('--momentum', type=float, default=0.9)
    parser.add_argument('--batch-size', type=int, default=1)
    parser.add_argument('--lr-period', type=int, default=10)
    parser.add_argument('--power', type=float, default=0.9)
    parser.add_argument('--lr-mode', choices=trainer.LR_MODES, default='poly')
    parser.add_argument('--augment-scale', action='store_true')
    parser.add_argument('--augment-crop', action='store_true')
    parser.add_argument('--augment-color', action='store_true')
    parser.add_argument('--scale-min', type=float, default=0.75)
    parser.add_argument('--scale-max', type=float, default=1.25)
    parser.add_argument('--color-jitter', type=float, default=0.1)
    parser.add_argument('--log-every', type=int, default=10)
    parser.add_argument('--classes', type=int, help='number of classes (default: inferred from labels)')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='dcnn', description='Depth-aware CNN toolkit')
    parser.add_argument('--log-level', default=SETTINGS['log_level'])
    parser.add_argument('--dump-config', action='store_true', help='print resolved settings as JSON and exit')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=SETTINGS['seed'])
    common.add_argument('--ignore-label', type=int, default=SETTINGS['ignore_label'])
    sub = parser.add_subparsers(dest='command')

    p = sub.add_parser('gen-data', help='write a synthetic RGB-D dataset', parents=[common])
    p.add_argument('--out', required=True)
    p.add_argument('--images', type=int, default=200)
    p.add_argument('--test-images', type=int, default=0, help='also write a held-out split under OUT/test')
    p.add_argument('--size', default='64', help='N or HxW')
    p.add_argument('--classes', type=int, default=4)
    p.add_argument('--shapes', type=int, default=4, help='objects per image')
    p.add_argument('--ambiguous', action=argparse.BooleanOptionalAction, default=True)
    p.add_argument('--noise', type=float, default=0.0, help='RGB noise sigma')
    p.add_argument('--depth-noise', type=float, default=0.0, help='depth noise sigma (m)')
    p.add_argument('--hole-prob', type=float, default=0.0)

    p = sub.add_parser('train', help='train a preset on a dataset directory', parents=[common])
    p.add_argument('--data', required=True)
    p.add_argument('--preset', choices=PRESETS, default='dcnn-mini')
    p.add_argument('--out', required=True, help='directory for checkpoints and loss.csv')
    p.add_argument('--checkpoint-every', type=int, default=0)
    _add_sim_args(p)
    _add_train_args(p)

    p = sub.add_parser('eval', help='evaluate a checkpoint', parents=[common])
    p.add_argument('--data', required=True)
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--preset', choices=PRESETS, default='dcnn-mini')
    p.add_argument('--out')
    p.add_argument('--format', choices=('json', 'csv'), default='json')
    _add_sim_args(p)

    p = sub.add_parser('gradcheck', help='finite-difference gradient checks', parents=[common])
    p.add_argument('--target', choices=gradcheck.TARGETS, default='ops')
    p.add_argument('--instances', type=int, default=20)
    p.add_argument('--samples', type=int)
    p.add_argument('--eps', type=float, default=SETTINGS['gradcheck_eps'])
    p.add_argument('--tolerance', type=float)

    p = sub.add_parser('bench', help='time depth-aware against standard convolution', parents=[common])
    p.add_argument('--sizes', help='comma-separated spatial sizes (default 128)')
    p.add_argument('--channels', type=int, default=64)
    p.add_argument('--kernel', type=int, default=3)
    p.add_argument('--config', action='append', help='CIN->COUT@SIZE[kK], repeatable')
    p.add_argument('--reps', type=int, default=bench.MIN_REPS)
    p.add_argument('--quick', action='store_true', help=f'allow fewer than {bench.MIN_REPS} repetitions (smoke runs)')
    p.add_argument('--warmup', type=int, default=bench.MIN_WARMUP)
    p.add_argument('--dtype', choices=('float64', 'float32'))
    p.add_argument('--max-ratio', type=float, help='fail (exit 4) when any ratio exceeds this')
    p.add_argument('--out')

    p = sub.add_parser('rf-trace', help='trace effective receptive field weights', parents=[common])
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument('--checkpoint')
    source.add_argument('--fresh', action='store_true', help='all-ones 3x3 kernels')
    p.add_argument('--preset', choices=PRESETS, default='dcnn-mini')
    p.add_argument('--depth-file', required=True, help='16-bit PGM depth (mm)')
    p.add_argument('--pixel', required=True, help='y,x')
    p.add_argument('--levels', type=int, default=3)
    p.add_argument('--out', required=True, help='PGM heatmap')
    _add_sim_args(p)

    p = sub.add_parser('depth-variance', help='per-class depth variance analysis', parents=[common])
    p.add_argument('--data', required=True)
    p.add_argument('--classes', type=int)
    p.add_argument('--sample', action='store_true', help='sample (n-1) instead of population variance')
    p.add_argument('--out')

    p = sub.add_parser('compare', help='train and evaluate several presets on one split', parents=[common])
    p.add_argument('--data', required=True)
    p.add_argument('--test-data', help='held-out dataset (default DATA/test)')
    p.add_argument('--presets', default='baseline-mini,dcnn-mini')
    p.add_argument('--sims', default='exp', help="e.g. 'exp:8.3,exp:2.5,exp:20,clip,one'")
    p.add_argument('--clip-threshold', type=float, default=SETTINGS['clip_threshold'])
    p.add_argument('--seeds', default=str(SETTINGS['seed']))
    p.add_argument('--out', required=True, help='CSV of runs')
    p.add_argument('--summary', help='JSON summary with per-class IoU deltas')
    _add_train_args(p)
    return parser


def _resolved(args) -> Dict[str, Any]:
    return {k: v for k, v in vars(args).items() if k != 'dump_config'}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad flags and 0 after --help
        return int(e.code or 0)
    configure_logging(args.log_level)
    try:
        if args.dump_config:
            print(json.dumps(dump_config(_resolved(args)), indent=2, default=str))
            return 0
        handler = HANDLERS.get(args.command)
        if handler is None:
            parser.print_usage(sys.stderr)
            logger.error("❌ a subcommand is required")
            return 2
        logger.debug(f"🔍 {args.command} {_resolved(args)}")
        result = handler(args)
        if isinstance(result, str):
            print(result, end='')
        else:
            print(json.dumps(result, indent=2, default=str))
        if isinstance(result, dict) and result.get('passed') is False:
            logger.error(f"❌ {args.command} check failed")
            return NumericalCheckError.exit_code
        logger.info(f"✅ {args.command} done")
        return 0
    except DcnnError as e:
        logger.error(f"❌ {type(e).__name__}: {e.message}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"❌ Unexpected error in {args.command}: {e}")
        return 1


if __name__ == '__main__':
    sys.exit(main())

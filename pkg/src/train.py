"""
Depth-aware CNN toolkit - training
SGD with momentum under a poly learning-rate schedule, data augmentation,
evaluation and the preset comparison workflow.
"""

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from autograd import Parameter, zero_grad
from config import SETTINGS
from data import DepthPyramid, Scene, build_pyramid, infer_num_classes
from errors import ArgumentError, DataError, DatasetIOError, NumericalCheckError, StateError
from metrics import ConfusionMatrix, MetricReport, compute_metrics, iou_delta
from model import Model, build, preset_spec, save_checkpoint, with_similarity
from similarity import DepthMap, SimilaritySpec
from tensor_core import DTYPE, Rng, Tensor, all_finite

logger = logging.getLogger(__name__)

IGNORE_LABEL = SETTINGS['ignore_label']
LR_MODES = ('poly', 'compound')
SHUFFLE_STREAM = 2 ** 32  # keeps epoch shuffles apart from per-iteration augmentation streams


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 1
    max_iter: int = 100
    lr_update_period: int = 10
    power: float = 0.9
    lr_mode: str = 'poly'
    seed: int = SETTINGS['seed']
    sim: Optional[SimilaritySpec] = None
    augment_scale: bool = False
    augment_crop: bool = False
    augment_color: bool = False
    scale_range: Tuple[float, float] = (0.75, 1.25)
    color_jitter: float = 0.1
    checkpoint_every: int = 0
    log_every: int = 10
    ignore_label: int = IGNORE_LABEL

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ArgumentError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ArgumentError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.max_iter < 1:
            raise ArgumentError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr_update_period < 1:
            raise ArgumentError(f"lr update period must be >= 1, got {self.lr_update_period}")
        if self.lr_mode not in LR_MODES:
            raise ArgumentError(f"unknown lr mode {self.lr_mode!r}; choose from {LR_MODES}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ArgumentError(f"invalid scale range {self.scale_range}")
        if self.color_jitter < 0 or self.checkpoint_every < 0:
            raise ArgumentError("color jitter and checkpoint interval must be >= 0")


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float = 0.9, period: int = 10,
            mode: str = 'poly') -> float:
    """
    poly:     base_lr * (1 - floor(iter/period)*period / max_iter) ** power
    compound: the poly factor applied again at every period boundary
    """
    if max_iter < 1:
        raise ArgumentError(f"max_iter must be >= 1, got {max_iter}")
    if period < 1:
        raise ArgumentError(f"period must be >= 1, got {period}")
    if iteration < 0 or iteration > max_iter:
        raise ArgumentError(f"iteration {iteration} outside 0..{max_iter}")
    if iteration >= max_iter:
        return 0.0
    boundary = (iteration // period) * period
    if mode == 'poly':
        return base_lr * (1.0 - boundary / max_iter) ** power
    if mode == 'compound':
        lr = base_lr
        for step in range(period, boundary + 1, period):
            lr *= (1.0 - step / max_iter) ** power
        return lr
    raise ArgumentError(f"unknown lr mode {mode!r}; choose from {LR_MODES}")


def sgd_step(params: Sequence[Parameter], lr: float, momentum: float, velocity: Dict[str, Tensor]) -> None:
    """v <- momentum*v + grad; p <- p - lr*v. Missing velocities start at zero."""
    for param in params:
        if not param.trainable:
            continue
        v = velocity.get(param.name)
        if v is None:
            v = np.zeros_like(param.value)
        if v.shape != param.value.shape or param.grad.shape != param.value.shape:
            raise StateError(f"{param.name}: velocity {v.shape} / grad {param.grad.shape} "
                             f"do not match parameter {param.value.shape}")
        v = momentum * v + param.grad
        velocity[param.name] = v
        param.value = param.value - lr * v


class SGD:
    def __init__(self, params: Sequence[Parameter], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity: Dict[str, Tensor] = {}

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self, lr: float) -> None:
        sgd_step(self.params, lr, self.momentum, self.velocity)


# ---------------------------------------------------------------------------
# augmentation

def _fit(array: np.ndarray, out_h: int, out_w: int, top: int, left: int, fill) -> np.ndarray:
    """Crop (top/left >= 0) or pad (negative offsets) the last two axes to out_h x out_w"""
    height, width = array.shape[-2:]
    result = np.full(array.shape[:-2] + (out_h, out_w), fill, dtype=array.dtype)
    src_y0, src_x0 = max(top, 0), max(left, 0)
    dst_y0, dst_x0 = max(-top, 0), max(-left, 0)
    rows = min(height - src_y0, out_h - dst_y0)
    cols = min(width - src_x0, out_w - dst_x0)
    if rows > 0 and cols > 0:
        result[..., dst_y0:dst_y0 + rows, dst_x0:dst_x0 + cols] = array[..., src_y0:src_y0 + rows, src_x0:src_x0 + cols]
    return result


def augment(scene: Scene, rng: Rng, config: TrainConfig) -> Scene:
    """Random scale (nearest), crop/pad back to the training size and RGB color jitter"""
    rgb, depth, valid, labels = scene.rgb, scene.depth.values, scene.depth.valid, scene.labels
    height, width = labels.shape
    if config.augment_scale:
        factor = rng.uniform(*config.scale_range)
        new_h, new_w = max(1, int(round(height * factor))), max(1, int(round(width * factor)))
        rows = np.minimum((np.arange(new_h) / factor).astype(np.int64), height - 1)
        cols = np.minimum((np.arange(new_w) / factor).astype(np.int64), width - 1)
        rgb = rgb[:, rows[:, None], cols[None, :]]
        # nearer-looking scenes: depth shrinks by the zoom factor
        depth = depth[rows[:, None], cols[None, :]] / factor
        valid = valid[rows[:, None], cols[None, :]]
        labels = labels[rows[:, None], cols[None, :]]
    cur_h, cur_w = labels.shape
    if (cur_h, cur_w) != (height, width) or config.augment_crop:
        if config.augment_crop:
            top = int(rng.integers(min(0, cur_h - height), max(0, cur_h - height) + 1))
            left = int(rng.integers(min(0, cur_w - width), max(0, cur_w - width) + 1))
        else:
            top, left = (cur_h - height) // 2, (cur_w - width) // 2
        rgb = _fit(rgb, height, width, top, left, 0.0)
        depth = _fit(depth, height, width, top, left, 0.0)
        valid = _fit(valid, height, width, top, left, False)
        labels = _fit(labels, height, width, top, left, config.ignore_label)
    if config.augment_color:
        j = config.color_jitter
        gain = rng.uniform(1.0 - j, 1.0 + j, 3)
        shift = rng.uniform(-j, j, 3)
        rgb = np.clip(rgb * gain[:, None, None] + shift[:, None, None], 0.0, 1.0)
    return Scene(np.ascontiguousarray(rgb, dtype=DTYPE), DepthMap.from_meters(depth, valid), labels)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    losses: List[Tuple[int, float, float]] = field(default_factory=list)  # (iter, loss, lr)
    epoch_losses: List[float] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)

    @property
    def final_epoch_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else float('nan')


def pyramid_for(model: Model, scene: Scene) -> DepthPyramid:
    return build_pyramid(scene.depth, model.spec.max_depth_level)


def write_loss_csv(path: str, losses: Sequence[Tuple[int, float, float]]) -> None:
    try:
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(['iter', 'loss', 'lr'])
            for iteration, loss, lr in losses:
                writer.writerow([iteration, repr(float(loss)), repr(float(lr))])
    except OSError as e:
        raise DatasetIOError(f"cannot write loss curve ({e.strerror})", path)


def train(model: Model, scenes: Sequence[Scene], config: TrainConfig, out_dir: Optional[str] = None) -> TrainResult:
    """Deterministic in (config.seed, config, scenes); writes loss.csv and checkpoints under out_dir"""
    if not scenes:
        raise DataError("training set is empty")
    if out_dir is not None:
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as e:
            raise DatasetIOError(f"cannot create output directory ({e.strerror})", out_dir)
    if config.sim is not None:
        # the configured similarity overrides whatever the model spec was built with
        model.spec = with_similarity(model.spec, config.sim)
    root = Rng(config.seed)
    optimizer = SGD(model.parameters(), config.momentum)
    result = TrainResult()
    per_epoch = math.ceil(len(scenes) / config.batch_size)
    order: np.ndarray = np.arange(len(scenes))
    epoch_total, epoch_count = 0.0, 0
    augmenting = config.augment_scale or config.augment_crop or config.augment_color

    for iteration in range(config.max_iter):
        epoch, step = divmod(iteration, per_epoch)
        if step == 0:
            order = root.spawn(SHUFFLE_STREAM + epoch).permutation(len(scenes))
        lr = poly_lr(config.base_lr, iteration, config.max_iter, config.power,
                     config.lr_update_period, config.lr_mode)
        rng = root.spawn(iteration)
        optimizer.zero_grad()
        batch_loss = 0.0
        batch = order[step * config.batch_size:(step + 1) * config.batch_size]
        for index in batch:
            scene = scenes[int(index)]
            if augmenting:
                scene = augment(scene, rng, config)
            graph, loss, _ = model.loss_graph(scene.rgb, pyramid_for(model, scene), scene.labels,
                                              config.ignore_label)
            graph.forward({'rgb': scene.rgb})
            graph.backward(loss)
            batch_loss += float(loss.value)
        if len(batch) > 1:
            for param in optimizer.params:
                param.grad = param.grad / len(batch)
        batch_loss /= len(batch)
        if not math.isfinite(batch_loss) or not all(all_finite(p.grad) for p in optimizer.params):
            logger.error(f"❌ non-finite loss or gradient at iteration {iteration}")
            raise NumericalCheckError(f"training diverged at iteration {iteration} (loss {batch_loss})")
        optimizer.step(lr)

        result.losses.append((iteration, batch_loss, lr))
        epoch_total += batch_loss
        epoch_count += 1
        if step == per_epoch - 1 or iteration == config.max_iter - 1:
            result.epoch_losses.append(epoch_total / epoch_count)
            epoch_total, epoch_count = 0.0, 0
        if config.log_every and iteration % config.log_every == 0:
            logger.info(f"🔍 iter {iteration} loss {batch_loss:.6f} lr {lr:.3e}")
        if out_dir and config.checkpoint_every and (iteration + 1) % config.checkpoint_every == 0:
            path = os.path.join(out_dir, f"checkpoint_{iteration + 1:06d}.dcnn")
            save_checkpoint(path, model)
            result.checkpoints.append(path)

    if out_dir:
        path = os.path.join(out_dir, 'checkpoint.dcnn')
        save_checkpoint(path, model)
        result.checkpoints.append(path)
        write_loss_csv(os.path.join(out_dir, 'loss.csv'), result.losses)
    logger.info(f"✅ trained {model.spec.preset} for {config.max_iter} iterations, "
                f"final epoch loss {result.final_epoch_loss:.6f}")
    return result


def predict(model: Model, scene: Scene) -> np.ndarray:
    logits = model.forward_segmentation(scene.rgb, pyramid_for(model, scene))
    # argmax takes the lowest class id on ties
    return logits.argmax(axis=0)


def evaluate(model: Model, scenes: Sequence[Scene], ignore_label: int = IGNORE_LABEL) -> MetricReport:
    if not scenes:
        raise DataError("evaluation set is empty")
    cm = ConfusionMatrix(model.spec.num_classes)
    for scene in scenes:
        cm.accumulate(predict(model, scene), scene.labels, ignore_label)
    report = compute_metrics(cm)
    logger.info(f"✅ evaluated {len(scenes)} scenes: acc {report.acc:.4f} miou {report.miou:.4f}")
    return report


# ---------------------------------------------------------------------------
# preset comparison

@dataclass
class CompareRow:
    preset: str
    sim: str
    alpha: Optional[float]
    seed: int
    final_epoch_loss: float
    report: MetricReport

    def csv_row(self) -> List:
        return [self.preset, self.sim, '' if self.alpha is None else self.alpha, self.seed,
                repr(self.final_epoch_loss), self.report.acc, self.report.macc, self.report.miou, self.report.fwiou]


COMPARE_HEADER = ['preset', 'sim', 'alpha', 'seed', 'final_epoch_loss', 'acc', 'macc', 'miou', 'fwiou']


def compare(train_scenes: Sequence[Scene], test_scenes: Sequence[Scene], presets: Sequence[str],
            sims: Sequence[SimilaritySpec], seeds: Sequence[int], config: TrainConfig,
            num_classes: Optional[int] = None) -> List[CompareRow]:
    """Train every (preset, similarity, seed) with the same budget and evaluate on the held-out scenes"""
    if not presets or not seeds:
        raise ArgumentError("compare needs at least one preset and one seed")
    num_classes = num_classes or infer_num_classes(train_scenes, config.ignore_label)
    rows = []
    for seed in seeds:
        for preset in presets:
            variants = [None] if preset == 'baseline-mini' else list(sims)
            for sim in variants:
                spec = preset_spec(preset, num_classes, sim)
                model = build(spec, Rng(seed))
                run_config = replace(config, seed=seed, sim=sim)
                result = train(model, train_scenes, run_config)
                report = evaluate(model, test_scenes, config.ignore_label)
                alpha = sim.alpha if sim is not None and sim.variant == 'exp' else None
                rows.append(CompareRow(preset, 'none' if sim is None else sim.variant, alpha, seed,
                                       result.final_epoch_loss, report))
                logger.info(f"🔍 {preset} {rows[-1].sim} seed {seed}: miou {report.miou:.4f}")
    return rows


def compare_summary(rows: Sequence[CompareRow], baseline: str = 'baseline-mini') -> Dict:
    """Mean metrics per configuration plus per-class IoU deltas against the baseline of the same seed"""
    baselines = {row.seed: row for row in rows if row.preset == baseline}
    groups: Dict[str, List[CompareRow]] = {}
    for row in rows:
        key = row.preset if row.sim == 'none' else f"{row.preset}/{row.sim}" + (
            '' if row.alpha is None else f"/{row.alpha:g}")
        groups.setdefault(key, []).append(row)
    summary = {}
    for key, members in groups.items():
        entry = {
            'runs': len(members),
            'mean_final_epoch_loss': float(np.mean([m.final_epoch_loss for m in members])),
            'mean_miou': float(np.mean([m.report.miou for m in members])),
            'per_seed_miou': {str(m.seed): m.report.miou for m in members},
        }
        deltas = [iou_delta(m.report, baselines[m.seed].report) for m in members
                  if m.seed in baselines and m.preset != baseline]
        if deltas:
            entry['iou_delta_per_seed'] = deltas
            entry['wins_over_baseline'] = sum(
                1 for m in members if m.seed in baselines and m.report.miou > baselines[m.seed].report.miou)
        summary[key] = entry
    return summary


def write_compare_outputs(csv_path: str, json_path: Optional[str], rows: Sequence[CompareRow]) -> None:
    try:
        with open(csv_path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(COMPARE_HEADER)
            writer.writerows(row.csv_row() for row in rows)
        if json_path:
            with open(json_path, 'w') as f:
                json.dump(compare_summary(rows), f, indent=2)
    except OSError as e:
        raise DatasetIOError(f"cannot write comparison ({e.strerror})", e.filename or csv_path)

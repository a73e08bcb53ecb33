"""
Depth-aware CNN toolkit - segmentation metrics
Confusion matrix accumulation, pixel accuracy / mean accuracy / mean IoU /
frequency-weighted IoU, per-class breakdowns and the per-class depth
variance analysis.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from config import SETTINGS
from errors import DataError, DatasetIOError, ShapeError, UndefinedMetricError

logger = logging.getLogger(__name__)

IGNORE_LABEL = SETTINGS['ignore_label']
METRIC_NAMES = ('acc', 'macc', 'miou', 'fwiou')


class ConfusionMatrix:
    """counts[i, j]: pixels of ground truth class i predicted as class j"""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise DataError(f"confusion matrix needs >= 1 class, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, predicted: np.ndarray, truth: np.ndarray, ignore_label: int = IGNORE_LABEL) -> None:
        if predicted.shape != truth.shape:
            raise ShapeError(f"prediction {predicted.shape} and truth {truth.shape} differ in shape")
        truth = truth.astype(np.int64, copy=False).ravel()
        predicted = predicted.astype(np.int64, copy=False).ravel()
        keep = truth != ignore_label
        truth, predicted = truth[keep], predicted[keep]
        for name, values in (('truth', truth), ('predicted', predicted)):
            bad = (values < 0) | (values >= self.num_classes)
            if np.any(bad):
                raise DataError(f"{name} class id {int(values[bad][0])} outside 0..{self.num_classes - 1}")
        index = self.num_classes * truth + predicted
        self.counts += np.bincount(index, minlength=self.num_classes ** 2).reshape(self.num_classes, self.num_classes)

    def merge(self, other: 'ConfusionMatrix') -> 'ConfusionMatrix':
        if other.num_classes != self.num_classes:
            raise ShapeError(f"cannot merge {other.num_classes}-class matrix into {self.num_classes}-class matrix")
        self.counts += other.counts
        return self

    def reset(self) -> None:
        self.counts[:] = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_counts(cls, counts) -> 'ConfusionMatrix':
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ShapeError(f"confusion counts must be square, got {counts.shape}")
        if np.any(counts < 0):
            raise DataError("confusion counts must be >= 0")
        cm = cls(counts.shape[0])
        cm.counts[:] = counts
        return cm


@dataclass
class MetricReport:
    acc: float
    macc: float
    miou: float
    fwiou: float
    per_class_iou: List[Optional[float]] = field(default_factory=list)
    per_class_acc: List[Optional[float]] = field(default_factory=list)
    pixels: int = 0

    def to_dict(self) -> Dict:
        return asdict(self)

    def rows(self) -> List[List]:
        rows = [[name, getattr(self, name)] for name in METRIC_NAMES]
        rows += [[f"iou_{i}", '' if v is None else v] for i, v in enumerate(self.per_class_iou)]
        rows += [[f"acc_{i}", '' if v is None else v] for i, v in enumerate(self.per_class_acc)]
        return rows


def compute_metrics(cm: ConfusionMatrix) -> MetricReport:
    """
    With n_ij the counts, s_i = sum_j n_ij and s = sum_i s_i:
    acc = sum n_ii / s, macc = mean n_ii / s_i, miou = mean n_ii / (s_i + sum_j n_ji - n_ii),
    fwiou = sum s_i * iou_i / s. Classes with s_i = 0 are left out of the means.
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise UndefinedMetricError("confusion matrix is empty (no labeled pixels)")
    diag = np.diag(counts)
    support = counts.sum(axis=1)
    union = support + counts.sum(axis=0) - diag
    present = support > 0
    class_acc = diag[present] / support[present]
    class_iou = diag[present] / union[present]
    per_iou: List[Optional[float]] = [None] * cm.num_classes
    per_acc: List[Optional[float]] = [None] * cm.num_classes
    for slot, cls in enumerate(np.flatnonzero(present)):
        per_iou[cls] = float(class_iou[slot])
        per_acc[cls] = float(class_acc[slot])
    return MetricReport(
        acc=float(diag.sum() / total),
        macc=float(class_acc.mean()),
        miou=float(class_iou.mean()),
        fwiou=float((support[present] * class_iou).sum() / total),
        per_class_iou=per_iou,
        per_class_acc=per_acc,
        pixels=int(total),
    )


def iou_delta(report: MetricReport, baseline: MetricReport) -> List[Optional[float]]:
    """Per-class IoU improvement over a baseline; None where either side lacks the class"""
    if len(report.per_class_iou) != len(baseline.per_class_iou):
        raise ShapeError("reports cover different numbers of classes")
    return [None if a is None or b is None else a - b
            for a, b in zip(report.per_class_iou, baseline.per_class_iou)]


def write_metrics_json(path: str, report: MetricReport) -> None:
    try:
        with open(path, 'w') as f:
            json.dump(report.to_dict(), f, indent=2)
    except OSError as e:
        raise DatasetIOError(f"cannot write metrics ({e.strerror})", path)


def write_metrics_csv(path: str, report: MetricReport) -> None:
    try:
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(['metric', 'value'])
            writer.writerows(report.rows())
    except OSError as e:
        raise DatasetIOError(f"cannot write metrics ({e.strerror})", path)


# ---------------------------------------------------------------------------
# per-class depth variance

@dataclass
class DepthVarianceReport:
    per_class: Dict[int, Optional[float]]  # None = class never present
    all: float
    images: int
    ddof: int = 0

    def to_dict(self) -> Dict:
        return {'per_class': {str(k): v for k, v in self.per_class.items()},
                'all': self.all, 'images': self.images, 'ddof': self.ddof}


def depth_variance_report(scenes: Sequence, num_classes: Optional[int] = None, ddof: int = 0,
                          ignore_label: int = IGNORE_LABEL) -> DepthVarianceReport:
    """
    Per image: variance of valid depths for each present class and over all
    valid pixels; each is then averaged (unweighted) over the images where it
    is defined. ddof=0 is the population convention, ddof=1 the sample one.
    """
    if ddof not in (0, 1):
        raise DataError(f"ddof must be 0 or 1, got {ddof}")
    if num_classes is None:
        labeled = [s.labels[s.labels != ignore_label] for s in scenes]
        num_classes = max((int(l.max()) + 1 for l in labeled if l.size), default=0)
    sums = np.zeros(num_classes)
    hits = np.zeros(num_classes, dtype=np.int64)
    all_values = []
    for scene in scenes:
        valid = scene.depth.valid
        labeled = valid & (scene.labels != ignore_label)
        if not labeled.any():
            continue
        depths = scene.depth.values
        if valid.sum() > ddof:
            all_values.append(float(np.var(depths[valid], ddof=ddof)))
        for cls in np.unique(scene.labels[labeled]):
            if cls >= num_classes:
                raise DataError(f"label {int(cls)} outside 0..{num_classes - 1}")
            values = depths[labeled & (scene.labels == cls)]
            if values.size > ddof:
                sums[cls] += np.var(values, ddof=ddof)
                hits[cls] += 1
    if not all_values:
        raise DataError("no scene has a valid labeled depth pixel")
    per_class = {cls: (float(sums[cls] / hits[cls]) if hits[cls] else None) for cls in range(num_classes)}
    absent = [cls for cls, v in per_class.items() if v is None]
    if absent:
        logger.info(f"⚠️ classes never present with valid depth: {absent}")
    return DepthVarianceReport(per_class, float(np.mean(all_values)), len(all_values), ddof)

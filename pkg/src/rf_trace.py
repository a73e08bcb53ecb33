"""
Depth-aware CNN toolkit - receptive-field tracing
Back-propagates a one-hot output gradient through stacked single-channel
depth-aware convolutions. The result at each input pixel is the sum over
sampling paths of the product of F_D along the path (times the kernel
weights, which are all ones for a fresh trace).
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from data import write_pgm8
from errors import ArgumentError, SpecError
from model import POOL_KINDS, Model
from nnops import ConvKernel, ConvSpec, depth_conv_backward
from similarity import DepthMap, SimilaritySpec
from tensor_core import DTYPE, Tensor

logger = logging.getLogger(__name__)

SAME_REGION_TOLERANCE = 0.05  # meters


@dataclass(frozen=True)
class TraceLevel:
    kernel: Tensor  # [k, k] spatial weights
    dilation: int = 1
    sim: Optional[SimilaritySpec] = None  # None: plain convolution


@dataclass
class RfTrace:
    weights: Tensor  # [h, w] contribution of every input pixel
    pixel: Tuple[int, int]
    levels: int

    def heatmap(self) -> np.ndarray:
        """uint8 image scaled so the largest weight maps to 255"""
        top = float(self.weights.max())
        if top <= 0:
            return np.zeros(self.weights.shape, dtype=np.uint8)
        return np.round(self.weights / top * 255.0).astype(np.uint8)

    def region_split(self, depth: DepthMap, tolerance: float = SAME_REGION_TOLERANCE) -> Dict[str, float]:
        """Total weight on pixels at the traced pixel's depth versus everywhere else"""
        y, x = self.pixel
        if not depth.valid[y, x]:
            raise ArgumentError(f"traced pixel {self.pixel} has no valid depth")
        same = depth.valid & (np.abs(depth.values - depth.values[y, x]) <= tolerance)
        return {'same_region': float(self.weights[same].sum()),
                'other_region': float(self.weights[~same].sum())}


def fresh_levels(levels: int, sim: SimilaritySpec, kernel: int = 3) -> List[TraceLevel]:
    """`levels` all-ones kernels, every one depth-aware"""
    ones = np.ones((kernel, kernel), dtype=DTYPE)
    return [TraceLevel(ones, 1, sim) for _ in range(levels)]


def checkpoint_levels(model: Model, levels: int) -> List[TraceLevel]:
    """
    Channel-summed |W| of the first `levels` 3x3 convolutions, traced at input
    resolution. A layer behind a cumulative stride s samples taps s pixels
    apart in the input, so its dilation is scaled by s.
    """
    traced = []
    scale = 1
    for layer in model.spec.layers:
        if len(traced) == levels:
            break
        if layer.kind in POOL_KINDS:
            scale *= layer.pool.stride
            continue
        if layer.kind not in ('conv', 'dconv'):
            continue
        if (layer.conv.kernel_h, layer.conv.kernel_w) == (3, 3):
            profile = np.abs(model.params[f"{layer.name}.weight"].value).sum(axis=(0, 1))
            sim = layer.similarity if layer.kind == 'dconv' else None
            traced.append(TraceLevel(profile, layer.conv.dilation * scale, sim))
        scale *= layer.conv.stride
    if len(traced) < levels:
        raise SpecError(f"model has only {len(traced)} 3x3 convolutions, {levels} levels requested")
    return traced


def rf_trace(depth: DepthMap, pixel: Tuple[int, int], levels: Sequence[TraceLevel]) -> RfTrace:
    y, x = pixel
    if not (0 <= y < depth.height and 0 <= x < depth.width):
        raise ArgumentError(f"pixel {pixel} outside the {depth.height}x{depth.width} depth map")
    if not levels:
        raise ArgumentError("rf-trace needs at least one level")
    grad = np.zeros((1, depth.height, depth.width), dtype=DTYPE)
    grad[0, y, x] = 1.0
    features = np.zeros_like(grad)
    # the output unit sits on the last level, so walk the stack top-down
    for level in reversed(levels):
        size = level.kernel.shape[0]
        spec = ConvSpec(1, 1, size, size, padding=level.dilation * (size // 2), dilation=level.dilation,
                        has_bias=False)
        kernel = ConvKernel(level.kernel.reshape(spec.weight_shape).astype(DTYPE))
        sim = level.sim or SimilaritySpec.constant_one()
        grad, _, _ = depth_conv_backward(spec, kernel, features, depth, sim, grad)
    trace = RfTrace(grad[0], (y, x), len(levels))
    logger.info(f"✅ traced {len(levels)} levels from pixel {pixel}: "
                f"{int(np.count_nonzero(trace.weights))} contributing pixels")
    return trace


def write_heatmap(path: str, trace: RfTrace) -> None:
    write_pgm8(path, trace.heatmap())

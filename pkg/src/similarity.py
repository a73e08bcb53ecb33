"""
Depth-aware CNN toolkit - depth similarity
F_D variants (exponential, clipped, constant one), depth maps and per-window similarity maps.

Missing depth on either side of a pair gives F_D = 1, so holes degrade
locally to the standard operator. F_D never receives a gradient.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from config import SETTINGS
from errors import ArgumentError, ShapeError, SpecError
from tensor_core import DTYPE, Tensor, output_size, sliding_windows

EXPONENTIAL = 'exp'
CLIP = 'clip'
CONSTANT_ONE = 'one'
VARIANTS = (EXPONENTIAL, CLIP, CONSTANT_ONE)


@dataclass(frozen=True)
class SimilaritySpec:
    variant: str = EXPONENTIAL
    alpha: float = SETTINGS['alpha']  # 1/meter
    threshold: float = SETTINGS['clip_threshold']  # meters

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise SpecError(f"unknown similarity variant {self.variant!r}; choose from {VARIANTS}")
        if not self.alpha > 0 or not math.isfinite(self.alpha):
            raise SpecError(f"alpha must be a positive finite number, got {self.alpha}")
        if not self.threshold > 0 or not math.isfinite(self.threshold):
            raise SpecError(f"clip threshold must be a positive finite number, got {self.threshold}")

    @classmethod
    def exponential(cls, alpha: float = None) -> 'SimilaritySpec':
        return cls(EXPONENTIAL, alpha=SETTINGS['alpha'] if alpha is None else alpha)

    @classmethod
    def clip(cls, threshold: float = None) -> 'SimilaritySpec':
        return cls(CLIP, threshold=SETTINGS['clip_threshold'] if threshold is None else threshold)

    @classmethod
    def constant_one(cls) -> 'SimilaritySpec':
        return cls(CONSTANT_ONE)

    @property
    def is_constant(self) -> bool:
        return self.variant == CONSTANT_ONE

    def describe(self) -> str:
        if self.variant == EXPONENTIAL:
            return f"exp(alpha={self.alpha:g})"
        if self.variant == CLIP:
            return f"clip(threshold={self.threshold:g}m)"
        return "one"


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth in meters with a validity mask (False = missing)"""
    values: Tensor
    valid: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape != self.valid.shape:
            raise ShapeError(f"depth values {self.values.shape} and mask {self.valid.shape} must be equal 2-D shapes")
        if self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ShapeError(f"depth map must be non-empty, got {self.values.shape}")
        known = self.values[self.valid]
        if known.size and (not np.all(np.isfinite(known)) or np.any(known < 0)):
            raise ArgumentError("valid depths must be finite and >= 0")

    @classmethod
    def from_meters(cls, values, valid=None) -> 'DepthMap':
        values = np.array(values, dtype=DTYPE, copy=True)
        if valid is None:
            valid = np.isfinite(values)
        valid = np.array(valid, dtype=bool, copy=True)
        values = np.where(valid, values, 0.0)
        values.setflags(write=False)
        valid.setflags(write=False)
        return cls(values, valid)

    @classmethod
    def constant(cls, height: int, width: int, meters: float) -> 'DepthMap':
        return cls.from_meters(np.full((height, width), meters, dtype=DTYPE))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def nan_coded(self) -> Tensor:
        return np.where(self.valid, self.values, np.nan)


def similarity(spec: SimilaritySpec, d_i: Optional[float], d_j: Optional[float]) -> float:
    """F_D for one pixel pair; None or NaN means missing depth"""
    if d_i is None or d_j is None:
        return 1.0
    diff = np.array([abs(d_i - d_j)], dtype=DTYPE)
    return float(similarity_from_difference(spec, diff)[0])


def similarity_from_difference(spec: SimilaritySpec, diff: np.ndarray) -> np.ndarray:
    """Vectorised F_D from |d_i - d_j|; NaN differences (missing or padded depth) map to 1"""
    missing = np.isnan(diff)
    if spec.variant == CONSTANT_ONE:
        return np.ones(diff.shape, dtype=DTYPE)
    safe = np.where(missing, 0.0, diff)
    if spec.variant == EXPONENTIAL:
        values = np.exp(-spec.alpha * safe)
    else:
        values = (safe < spec.threshold).astype(DTYPE)
    values[missing] = 1.0
    return values


def similarity_map(spec: SimilaritySpec, depth: DepthMap, kernel_h: int, kernel_w: int,
                   stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """
    F_D between each window center and each (dilated) tap, shape
    [kernel_h*kernel_w, out_h*out_w] in row-major tap order. The center is tap
    ((kernel_h-1)//2, (kernel_w-1)//2); taps in the zero padding compare as equal depth.
    """
    out_h = output_size(depth.height, kernel_h, stride, padding, dilation)
    out_w = output_size(depth.width, kernel_w, stride, padding, dilation)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"window {kernel_h}x{kernel_w} (dilation {dilation}) does not fit depth {depth.shape}")
    if spec.is_constant:
        return np.ones((kernel_h * kernel_w, out_h * out_w), dtype=DTYPE)
    padded = np.pad(depth.nan_coded(), padding, mode='constant', constant_values=np.nan)
    taps = sliding_windows(padded, kernel_h, kernel_w, stride, dilation, out_h, out_w)
    centers = taps[:, :, (kernel_h - 1) // 2, (kernel_w - 1) // 2]
    diff = np.abs(taps - centers[:, :, None, None])
    fd = similarity_from_difference(spec, diff)
    # [out_h, out_w, kh, kw] -> [kh*kw, out_h*out_w]
    return np.ascontiguousarray(fd.transpose(2, 3, 0, 1).reshape(kernel_h * kernel_w, out_h * out_w))

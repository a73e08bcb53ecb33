"""
Depth-aware CNN toolkit - layer operations
Forward and backward passes for convolution, depth-aware convolution, average,
depth-aware average and max pooling, ReLU, the global-pool concat head,
nearest upsampling and softmax cross-entropy.

Summation order
---------------
Convolutions unroll the input into a patch matrix (im2col, tap-major rows
[channel, kernel_y, kernel_x]) and reduce with a single matrix product.
The depth-aware variant multiplies the patch matrix by the similarity map
before that same product, so when every F_D equals 1 both variants hand
bit-identical operands to the same reduction. Pooling reduces the
[channel, tap, position] array along the tap axis with weights that are
identical for both variants when F_D is 1. Gradients scatter back tap by
tap in row-major kernel order.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from config import SETTINGS
from errors import DataError, ShapeError, SpecError
from similarity import DepthMap, SimilaritySpec, similarity_map
from tensor_core import DTYPE, Tensor, output_size, sliding_windows

IGNORE_LABEL = SETTINGS['ignore_label']

POOL_MODES = ('max', 'avg', 'depth_avg', 'global_avg')


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int = 3
    kernel_w: int = 3
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    has_bias: bool = True

    def __post_init__(self):
        for name in ('in_channels', 'out_channels', 'kernel_h', 'kernel_w', 'stride', 'dilation'):
            if getattr(self, name) < 1:
                raise SpecError(f"ConvSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.padding < 0:
            raise SpecError(f"ConvSpec.padding must be >= 0, got {self.padding}")

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_h * self.kernel_w

    @property
    def parameter_count(self) -> int:
        return self.out_channels * self.fan_in + (self.out_channels if self.has_bias else 0)

    def output_hw(self, height: int, width: int) -> Tuple[int, int]:
        out_h = output_size(height, self.kernel_h, self.stride, self.padding, self.dilation)
        out_w = output_size(width, self.kernel_w, self.stride, self.padding, self.dilation)
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"conv {self.kernel_h}x{self.kernel_w} dilation {self.dilation} "
                             f"does not fit input {height}x{width} with padding {self.padding}")
        return out_h, out_w


@dataclass
class ConvKernel:
    weights: Tensor
    bias: Optional[Tensor] = None

    def check(self, spec: ConvSpec) -> None:
        if self.weights.shape != spec.weight_shape:
            raise ShapeError(f"kernel weights {self.weights.shape} do not match spec {spec.weight_shape}")
        if spec.has_bias:
            if self.bias is None or self.bias.shape != (spec.out_channels,):
                raise ShapeError(f"spec expects bias of shape ({spec.out_channels},)")
        elif self.bias is not None:
            raise ShapeError("spec has no bias but kernel carries one")


@dataclass(frozen=True)
class PoolSpec:
    kernel_h: int = 2
    kernel_w: int = 2
    stride: int = 2
    padding: int = 0
    mode: str = 'max'

    def __post_init__(self):
        if self.mode not in POOL_MODES:
            raise SpecError(f"unknown pool mode {self.mode!r}; choose from {POOL_MODES}")
        if min(self.kernel_h, self.kernel_w, self.stride) < 1:
            raise SpecError("pool kernel and stride must be >= 1")
        if self.padding < 0 or self.padding > min(self.kernel_h, self.kernel_w) // 2:
            raise SpecError(f"pool padding must be in [0, kernel//2], got {self.padding}")

    def output_hw(self, height: int, width: int) -> Tuple[int, int]:
        if self.mode == 'global_avg':
            return 1, 1
        out_h = output_size(height, self.kernel_h, self.stride, self.padding)
        out_w = output_size(width, self.kernel_w, self.stride, self.padding)
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"pool {self.kernel_h}x{self.kernel_w} does not fit input {height}x{width}")
        return out_h, out_w


# ---------------------------------------------------------------------------
# patch matrix helpers

def _check_feature(x: Tensor, channels: Optional[int] = None) -> None:
    if x.ndim != 3:
        raise ShapeError(f"feature map must be [channels, height, width], got shape {x.shape}")
    if channels is not None and x.shape[0] != channels:
        raise ShapeError(f"expected {channels} input channels, got {x.shape[0]}")


def _check_depth(x: Tensor, depth: DepthMap) -> None:
    if depth.shape != x.shape[1:]:
        raise ShapeError(f"depth map {depth.shape} does not match feature resolution {x.shape[1:]}")


def _im2col(x: Tensor, kernel_h: int, kernel_w: int, stride: int, padding: int, dilation: int,
            out_h: int, out_w: int, fill: float = 0.0) -> Tensor:
    """[C, H, W] -> [C, kernel_h*kernel_w, out_h*out_w]"""
    channels = x.shape[0]
    padded = np.pad(x, ((0, 0), (padding, padding), (padding, padding)), mode='constant', constant_values=fill)
    windows = sliding_windows(padded, kernel_h, kernel_w, stride, dilation, out_h, out_w)
    cols = np.ascontiguousarray(windows.transpose(0, 3, 4, 1, 2))
    return cols.reshape(channels, kernel_h * kernel_w, out_h * out_w)


def _col2im(cols: Tensor, shape: Tuple[int, int, int], kernel_h: int, kernel_w: int, stride: int,
            padding: int, dilation: int, out_h: int, out_w: int) -> Tensor:
    """Adjoint of _im2col: scatter-add [C, K, N] patches back onto [C, H, W]"""
    channels, height, width = shape
    padded = np.zeros((channels, height + 2 * padding, width + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(channels, kernel_h, kernel_w, out_h, out_w)
    row_span = stride * (out_h - 1) + 1
    col_span = stride * (out_w - 1) + 1
    for i in range(kernel_h):
        r0 = i * dilation
        for j in range(kernel_w):
            c0 = j * dilation
            padded[:, r0:r0 + row_span:stride, c0:c0 + col_span:stride] += cols[:, i, j]
    return np.ascontiguousarray(padded[:, padding:padding + height, padding:padding + width])


# ---------------------------------------------------------------------------
# convolution

@dataclass
class ConvContext:
    """Saved for backward: the (similarity-weighted) patch matrix and the similarity map"""
    cols: Tensor
    fd: Optional[Tensor]
    input_shape: Tuple[int, int, int]
    output_hw: Tuple[int, int]


def conv_forward_saved(spec: ConvSpec, kernel: ConvKernel, x: Tensor,
                       depth: Optional[DepthMap] = None,
                       sim: Optional[SimilaritySpec] = None) -> Tuple[Tensor, ConvContext]:
    _check_feature(x, spec.in_channels)
    kernel.check(spec)
    out_h, out_w = spec.output_hw(x.shape[1], x.shape[2])
    fd = None
    if depth is not None:
        _check_depth(x, depth)
        if sim is not None and not sim.is_constant:
            fd = similarity_map(sim, depth, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding,
                                spec.dilation).astype(x.dtype, copy=False)
    cols = _im2col(x, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding, spec.dilation, out_h, out_w)
    if fd is not None:
        cols = cols * fd[None, :, :]
    cols = cols.reshape(spec.fan_in, out_h * out_w)
    y = kernel.weights.reshape(spec.out_channels, spec.fan_in).astype(x.dtype, copy=False) @ cols
    if kernel.bias is not None:
        y += kernel.bias.astype(x.dtype, copy=False)[:, None]
    ctx = ConvContext(cols=cols, fd=fd, input_shape=x.shape, output_hw=(out_h, out_w))
    return y.reshape(spec.out_channels, out_h, out_w), ctx


def conv_backward_saved(spec: ConvSpec, kernel: ConvKernel, ctx: ConvContext,
                        grad_y: Tensor) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
    out_h, out_w = ctx.output_hw
    if grad_y.shape != (spec.out_channels, out_h, out_w):
        raise ShapeError(f"grad_y {grad_y.shape} does not match forward output {(spec.out_channels, out_h, out_w)}")
    grad_y2 = grad_y.reshape(spec.out_channels, out_h * out_w)
    grad_w = (grad_y2 @ ctx.cols.T).reshape(spec.weight_shape)
    grad_b = grad_y2.sum(axis=1) if spec.has_bias else None
    grad_cols = kernel.weights.reshape(spec.out_channels, spec.fan_in).T @ grad_y2
    grad_cols = grad_cols.reshape(spec.in_channels, spec.kernel_h * spec.kernel_w, out_h * out_w)
    if ctx.fd is not None:
        grad_cols = grad_cols * ctx.fd[None, :, :]
    grad_x = _col2im(grad_cols, ctx.input_shape, spec.kernel_h, spec.kernel_w, spec.stride,
                     spec.padding, spec.dilation, out_h, out_w)
    return grad_x, grad_w, grad_b


def conv_forward(spec: ConvSpec, kernel: ConvKernel, x: Tensor) -> Tensor:
    return conv_forward_saved(spec, kernel, x)[0]


def conv_backward(spec: ConvSpec, kernel: ConvKernel, x: Tensor,
                  grad_y: Tensor) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
    _, ctx = conv_forward_saved(spec, kernel, x)
    return conv_backward_saved(spec, kernel, ctx, grad_y)


def depth_conv_forward(spec: ConvSpec, kernel: ConvKernel, x: Tensor, depth: DepthMap,
                       sim: SimilaritySpec) -> Tensor:
    return conv_forward_saved(spec, kernel, x, depth, sim)[0]


def depth_conv_backward(spec: ConvSpec, kernel: ConvKernel, x: Tensor, depth: DepthMap,
                        sim: SimilaritySpec, grad_y: Tensor) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
    """Gradients for x, w and bias; F_D is a constant, depth gets no gradient"""
    _, ctx = conv_forward_saved(spec, kernel, x, depth, sim)
    return conv_backward_saved(spec, kernel, ctx, grad_y)


# ---------------------------------------------------------------------------
# pooling

@dataclass
class PoolContext:
    weights: Optional[Tensor]  # [K, N] normalized window weights (avg modes)
    argmax: Optional[np.ndarray]  # [C, N] winning tap (max mode)
    input_shape: Tuple[int, int, int]
    output_hw: Tuple[int, int]


def _window_weights(spec: PoolSpec, height: int, width: int, out_h: int, out_w: int,
                    fd: Optional[Tensor], dtype) -> Tensor:
    """In-bounds mask times F_D, normalized per window (count-exclude-pad)"""
    ones = np.ones((1, height, width), dtype=dtype)
    mask = _im2col(ones, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding, 1, out_h, out_w)[0]
    weights = mask if fd is None else mask * fd
    return weights / weights.sum(axis=0, keepdims=True)


def avg_pool_forward_saved(spec: PoolSpec, x: Tensor, depth: Optional[DepthMap] = None,
                           sim: Optional[SimilaritySpec] = None) -> Tuple[Tensor, PoolContext]:
    _check_feature(x)
    channels, height, width = x.shape
    if spec.mode == 'global_avg':
        y = x.mean(axis=(1, 2), keepdims=True)
        return y, PoolContext(None, None, x.shape, (1, 1))
    out_h, out_w = spec.output_hw(height, width)
    fd = None
    if depth is not None:
        _check_depth(x, depth)
        if sim is not None and not sim.is_constant:
            fd = similarity_map(sim, depth, spec.kernel_h, spec.kernel_w, spec.stride,
                                spec.padding).astype(x.dtype, copy=False)
    weights = _window_weights(spec, height, width, out_h, out_w, fd, x.dtype)
    cols = _im2col(x, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding, 1, out_h, out_w)
    y = (cols * weights[None, :, :]).sum(axis=1)
    ctx = PoolContext(weights, None, x.shape, (out_h, out_w))
    return y.reshape(channels, out_h, out_w), ctx


def avg_pool_backward_saved(spec: PoolSpec, ctx: PoolContext, grad_y: Tensor) -> Tensor:
    channels, height, width = ctx.input_shape
    out_h, out_w = ctx.output_hw
    if grad_y.shape != (channels, out_h, out_w):
        raise ShapeError(f"grad_y {grad_y.shape} does not match forward output {(channels, out_h, out_w)}")
    if spec.mode == 'global_avg':
        return np.broadcast_to(grad_y / (height * width), ctx.input_shape).copy()
    grad_cols = ctx.weights[None, :, :] * grad_y.reshape(channels, 1, out_h * out_w)
    return _col2im(grad_cols, ctx.input_shape, spec.kernel_h, spec.kernel_w, spec.stride,
                   spec.padding, 1, out_h, out_w)


def avg_pool_forward(spec: PoolSpec, x: Tensor) -> Tensor:
    return avg_pool_forward_saved(spec, x)[0]


def avg_pool_backward(spec: PoolSpec, x: Tensor, grad_y: Tensor) -> Tensor:
    _, ctx = avg_pool_forward_saved(spec, x)
    return avg_pool_backward_saved(spec, ctx, grad_y)


def depth_avg_pool_forward(spec: PoolSpec, x: Tensor, depth: DepthMap, sim: SimilaritySpec) -> Tensor:
    return avg_pool_forward_saved(spec, x, depth, sim)[0]


def depth_avg_pool_backward(spec: PoolSpec, x: Tensor, depth: DepthMap, sim: SimilaritySpec,
                            grad_y: Tensor) -> Tensor:
    """grad_y scaled by F_D / sum(F_D) per window; no depth gradient"""
    _, ctx = avg_pool_forward_saved(spec, x, depth, sim)
    return avg_pool_backward_saved(spec, ctx, grad_y)


def max_pool_forward_saved(spec: PoolSpec, x: Tensor) -> Tuple[Tensor, PoolContext]:
    _check_feature(x)
    channels, height, width = x.shape
    out_h, out_w = spec.output_hw(height, width)
    cols = _im2col(x, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding, 1, out_h, out_w, fill=-np.inf)
    # argmax keeps the first occurrence in row-major window order
    argmax = cols.argmax(axis=1)
    y = np.take_along_axis(cols, argmax[:, None, :], axis=1)[:, 0, :]
    return y.reshape(channels, out_h, out_w), PoolContext(None, argmax, x.shape, (out_h, out_w))


def max_pool_backward_saved(spec: PoolSpec, ctx: PoolContext, grad_y: Tensor) -> Tensor:
    channels, _, _ = ctx.input_shape
    out_h, out_w = ctx.output_hw
    if grad_y.shape != (channels, out_h, out_w):
        raise ShapeError(f"grad_y {grad_y.shape} does not match forward output {(channels, out_h, out_w)}")
    grad_cols = np.zeros((channels, spec.kernel_h * spec.kernel_w, out_h * out_w), dtype=grad_y.dtype)
    np.put_along_axis(grad_cols, ctx.argmax[:, None, :], grad_y.reshape(channels, 1, out_h * out_w), axis=1)
    return _col2im(grad_cols, ctx.input_shape, spec.kernel_h, spec.kernel_w, spec.stride,
                   spec.padding, 1, out_h, out_w)


def max_pool_forward(spec: PoolSpec, x: Tensor) -> Tensor:
    return max_pool_forward_saved(spec, x)[0]


def max_pool_backward(spec: PoolSpec, x: Tensor, grad_y: Tensor) -> Tensor:
    _, ctx = max_pool_forward_saved(spec, x)
    return max_pool_backward_saved(spec, ctx, grad_y)


# ---------------------------------------------------------------------------
# activations and heads

def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(x: Tensor, grad_y: Tensor) -> Tensor:
    if grad_y.shape != x.shape:
        raise ShapeError(f"grad_y {grad_y.shape} does not match input {x.shape}")
    return grad_y * (x > 0)


def global_pool_concat(x: Tensor) -> Tensor:
    """[C, h, w] -> [2C, h, w]: x followed by its per-channel spatial mean broadcast everywhere"""
    _check_feature(x)
    means = x.mean(axis=(1, 2), keepdims=True)
    return np.concatenate([x, np.broadcast_to(means, x.shape)], axis=0)


def global_pool_concat_backward(x: Tensor, grad_y: Tensor) -> Tensor:
    channels, height, width = x.shape
    if grad_y.shape != (2 * channels, height, width):
        raise ShapeError(f"grad_y {grad_y.shape} does not match concat output {(2 * channels, height, width)}")
    pooled = grad_y[channels:].sum(axis=(1, 2), keepdims=True) / (height * width)
    return grad_y[:channels] + pooled


def _nearest_index(out_size: int, in_size: int) -> np.ndarray:
    return (np.arange(out_size) * in_size) // out_size


def upsample_nearest(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _check_feature(x)
    rows = _nearest_index(out_h, x.shape[1])
    cols = _nearest_index(out_w, x.shape[2])
    return x[:, rows[:, None], cols[None, :]]


def upsample_nearest_backward(x_shape: Tuple[int, int, int], grad_y: Tensor) -> Tensor:
    channels, height, width = x_shape
    rows = _nearest_index(grad_y.shape[1], height)
    cols = _nearest_index(grad_y.shape[2], width)
    grad_x = np.zeros(x_shape, dtype=grad_y.dtype)
    np.add.at(grad_x, (slice(None), rows[:, None], cols[None, :]), grad_y)
    return grad_x


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray,
                          ignore_label: int = IGNORE_LABEL) -> Tuple[float, Tensor]:
    """Mean NLL over non-ignored pixels and its gradient w.r.t. logits"""
    _check_feature(logits)
    num_classes = logits.shape[0]
    if labels.shape != logits.shape[1:]:
        raise ShapeError(f"labels {labels.shape} do not match logits resolution {logits.shape[1:]}")
    labels = labels.astype(np.int64, copy=False)
    valid = labels != ignore_label
    bad = valid & ((labels < 0) | (labels >= num_classes))
    if np.any(bad):
        raise DataError(f"label {int(labels[bad][0])} outside 0..{num_classes - 1} and not ignore ({ignore_label})")
    count = int(valid.sum())
    if count == 0:
        return 0.0, np.zeros_like(logits)
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    log_prob = shifted - log_norm
    target = np.where(valid, labels, 0)
    picked = np.take_along_axis(log_prob, target[None], axis=0)[0]
    loss = float(-picked[valid].sum() / count)
    grad = np.exp(log_prob)
    np.put_along_axis(grad, target[None], np.take_along_axis(grad, target[None], axis=0) - 1.0, axis=0)
    grad *= valid[None] / count
    return loss, grad

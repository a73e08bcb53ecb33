"""
Depth-aware CNN toolkit - tensor core
Dense row-major float64 arrays (numpy), shape checks, flat indexing and a seeded generator.

Tensors are plain C-contiguous numpy arrays. Library results are frozen
(read-only) so they can be shared between readers; callers that need to
mutate take a copy.
"""

from typing import Sequence, Tuple, Union

import numpy as np

from errors import ArgumentError, ShapeError

DTYPE = np.float64
BENCH_DTYPES = {'float64': np.float64, 'float32': np.float32}

Tensor = np.ndarray
Shape = Tuple[int, ...]


def check_shape(shape: Sequence[int]) -> Shape:
    """Validate a shape: nonempty, every dimension a positive integer"""
    shape = tuple(shape)
    if len(shape) == 0:
        raise ShapeError("shape must have at least one dimension")
    for dim in shape:
        if int(dim) != dim or dim < 1:
            raise ShapeError(f"invalid dimension {dim!r} in shape {shape}")
    return tuple(int(d) for d in shape)


def freeze(t: Tensor) -> Tensor:
    t.setflags(write=False)
    return t


def tensor_fill(shape: Sequence[int], value: float) -> Tensor:
    shape = check_shape(shape)
    return freeze(np.full(shape, value, dtype=DTYPE))


class Rng:
    """
    Seeded generator: numpy PCG64 seeded from a 64-bit unsigned integer.
    Identical seeds give identical streams within one numpy build; no
    cross-build bit compatibility is promised.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2 ** 64:
            raise ArgumentError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path: Tuple[int, ...] = ()
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, key: int) -> 'Rng':
        """Independent child stream keyed by an integer (e.g. iteration index); children nest"""
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child.path = self.path + (int(key),)
        child.generator = np.random.Generator(np.random.PCG64([self.seed, *child.path]))
        return child

    def uniform(self, lo: float, hi: float, size=None):
        return self.generator.uniform(lo, hi, size)

    def integers(self, lo: int, hi: int, size=None):
        return self.generator.integers(lo, hi, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def tensor_rand_uniform(rng: Rng, shape: Sequence[int], lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise ArgumentError(f"rand_uniform needs lo < hi, got lo={lo} hi={hi}")
    shape = check_shape(shape)
    values = rng.generator.uniform(lo, hi, shape).astype(DTYPE, copy=False)
    # uniform() may round up to hi for very narrow ranges
    values = np.where(values >= hi, np.nextafter(hi, lo), values)
    return freeze(np.ascontiguousarray(values))


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, 'add')
    return freeze(np.add(a, b, dtype=DTYPE))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, 'sub')
    return freeze(np.subtract(a, b, dtype=DTYPE))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, 'mul')
    return freeze(np.multiply(a, b, dtype=DTYPE))


ELEMENTWISE = {'add': add, 'sub': sub, 'mul': mul}


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    handler = ELEMENTWISE.get(op)
    if handler is None:
        raise ArgumentError(f"unknown elementwise op: {op}")
    return handler(a, b)


def reduce_sum(a: Tensor) -> float:
    # pairwise summation over the flattened row-major data
    return float(np.sum(a, dtype=DTYPE))


def flat_index(shape: Sequence[int], index: Sequence[int]) -> int:
    """Row-major offset ((i0*d1 + i1)*d2 + ...) with bounds checking"""
    if len(index) != len(shape):
        raise ShapeError(f"index {tuple(index)} has rank {len(index)}, shape {tuple(shape)} has rank {len(shape)}")
    offset = 0
    for i, d in zip(index, shape):
        if i < 0 or i >= d:
            raise ShapeError(f"index {tuple(index)} out of bounds for shape {tuple(shape)}")
        offset = offset * d + i
    return offset


def get(t: Tensor, index: Sequence[int]) -> float:
    return float(t.reshape(-1)[flat_index(t.shape, index)])


def set_value(t: Tensor, index: Sequence[int], value: float) -> None:
    """Write one element; only valid on tensors still under construction"""
    if not t.flags.writeable:
        raise ShapeError("tensor is frozen; copy it before writing")
    t.reshape(-1)[flat_index(t.shape, index)] = value


def output_size(size: int, kernel: int, stride: int, padding: int, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def sliding_windows(padded: Tensor, kernel_h: int, kernel_w: int, stride: int, dilation: int,
                    out_h: int, out_w: int) -> Tensor:
    """
    Strided view [..., out_h, out_w, kernel_h, kernel_w] over the last two axes
    of an already padded array. Tap (i, j) of window (oy, ox) reads
    padded[..., oy*stride + i*dilation, ox*stride + j*dilation].
    """
    span_h = dilation * (kernel_h - 1) + 1
    span_w = dilation * (kernel_w - 1) + 1
    view = np.lib.stride_tricks.sliding_window_view(padded, (span_h, span_w), axis=(-2, -1))
    view = view[..., ::stride, ::stride, ::dilation, ::dilation]
    return view[..., :out_h, :out_w, :, :]


def all_finite(t: Tensor) -> bool:
    return bool(np.all(np.isfinite(t)))


def bench_dtype(name: Union[str, None]):
    if name is None:
        return DTYPE
    dtype = BENCH_DTYPES.get(name)
    if dtype is None:
        raise ArgumentError(f"unsupported dtype {name!r}; choose from {sorted(BENCH_DTYPES)}")
    return dtype

"""
Depth-aware CNN toolkit - forward-pass micro-benchmarks
Times standard against depth-aware convolution on identical inputs and
reports the median of the timed runs.
"""

import csv
import io
import logging
import re
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from config import SETTINGS
from errors import ArgumentError, DatasetIOError
from nnops import ConvKernel, ConvSpec, conv_forward, depth_conv_forward
from similarity import DepthMap, SimilaritySpec
from tensor_core import Rng, bench_dtype

logger = logging.getLogger(__name__)

MIN_WARMUP = 3
MIN_REPS = 20
BENCH_HEADER = ['config', 'standard_ns', 'depth_aware_ns', 'ratio']
_CONFIG_PATTERN = re.compile(r'^(\d+)->(\d+)@(\d+)(?:k(\d+))?$')


class BenchmarkResult:
    """Sorted timing samples (nanoseconds) of one benchmark"""

    def __init__(self, name: str, samples: Sequence[int]):
        self.name = name
        self.samples = sorted(samples)

    @property
    def best(self) -> int:
        return self.samples[0]

    @property
    def worst(self) -> int:
        return self.samples[-1]

    @property
    def mean(self) -> float:
        return float(np.mean(self.samples))

    @property
    def median(self) -> float:
        return float(np.median(self.samples))


@dataclass(frozen=True)
class BenchConfig:
    in_channels: int = 64
    out_channels: int = 64
    size: int = 128
    kernel: int = 3

    @property
    def name(self) -> str:
        return f"{self.in_channels}->{self.out_channels}@{self.size}k{self.kernel}"

    @classmethod
    def parse(cls, text: str) -> 'BenchConfig':
        """'64->64@128k3' or '64->64@128' (3x3 kernel)"""
        match = _CONFIG_PATTERN.match(text.strip())
        if not match:
            raise ArgumentError(f"bad bench config {text!r}; expected CIN->COUT@SIZE[kK]")
        cin, cout, size, kernel = match.groups()
        config = cls(int(cin), int(cout), int(size), int(kernel or 3))
        if min(config.in_channels, config.out_channels, config.size, config.kernel) < 1:
            raise ArgumentError(f"bench config {text!r} has a zero dimension")
        return config


@dataclass
class BenchRow:
    config: str
    standard: BenchmarkResult
    depth_aware: BenchmarkResult

    @property
    def ratio(self) -> float:
        return self.depth_aware.median / self.standard.median

    def csv_row(self) -> List:
        return [self.config, int(round(self.standard.median)), int(round(self.depth_aware.median)),
                f"{self.ratio:.4f}"]


def time_callable(name: str, fn: Callable[[], object], reps: int, warmup: int = MIN_WARMUP) -> BenchmarkResult:
    if reps < 1:
        raise ArgumentError(f"repetitions must be >= 1, got {reps}")
    if warmup < MIN_WARMUP:
        raise ArgumentError(f"warmup must be >= {MIN_WARMUP}, got {warmup}")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        start = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - start)
    return BenchmarkResult(name, samples)


def bench_config(config: BenchConfig, reps: int = MIN_REPS, warmup: int = MIN_WARMUP,
                 dtype: Optional[str] = None, seed: int = SETTINGS['seed'], against_self: bool = False,
                 quick: bool = False) -> BenchRow:
    """
    Median forward time of conv and depth-aware conv (or conv against itself)
    over at least MIN_REPS timed runs. `quick` lifts that floor for smoke runs.
    """
    if reps < 1:
        raise ArgumentError(f"repetitions must be >= 1, got {reps}")
    if reps < MIN_REPS:
        if not quick:
            raise ArgumentError(f"medians need >= {MIN_REPS} repetitions, got {reps} (use quick for smoke runs)")
        logger.warning(f"⚠️ quick run: {reps} repetitions, medians below {MIN_REPS} runs are noisy")
    np_dtype = bench_dtype(dtype or SETTINGS['bench_dtype'])
    rng = Rng(seed)
    spec = ConvSpec(config.in_channels, config.out_channels, config.kernel, config.kernel,
                    padding=config.kernel // 2)
    x = rng.normal(0.0, 1.0, (config.in_channels, config.size, config.size)).astype(np_dtype)
    kernel = ConvKernel(rng.normal(0.0, 0.1, spec.weight_shape).astype(np_dtype),
                        np.zeros(config.out_channels, dtype=np_dtype))
    depth = DepthMap.from_meters(rng.uniform(0.5, 5.0, (config.size, config.size)))
    sim = SimilaritySpec.exponential()

    standard = time_callable('conv', lambda: conv_forward(spec, kernel, x), reps, warmup)
    if against_self:
        other = time_callable('conv', lambda: conv_forward(spec, kernel, x), reps, warmup)
    else:
        other = time_callable('dconv', lambda: depth_conv_forward(spec, kernel, x, depth, sim), reps, warmup)
    row = BenchRow(config.name, standard, other)
    logger.info(f"🔍 {config.name} [{np.dtype(np_dtype).name}]: standard {standard.median:.0f} ns, "
                f"{'self' if against_self else 'depth-aware'} {other.median:.0f} ns, ratio {row.ratio:.3f}")
    return row


def run_bench(configs: Sequence[BenchConfig], reps: int = MIN_REPS, warmup: int = MIN_WARMUP,
              dtype: Optional[str] = None, seed: int = SETTINGS['seed'], quick: bool = False) -> List[BenchRow]:
    if not configs:
        raise ArgumentError("no bench configs given")
    return [bench_config(c, reps, warmup, dtype, seed, quick=quick) for c in configs]


def bench_csv(rows: Sequence[BenchRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(BENCH_HEADER)
    writer.writerows(row.csv_row() for row in rows)
    return buffer.getvalue()


def write_bench_csv(path: str, rows: Sequence[BenchRow]) -> None:
    try:
        with open(path, 'w', newline='') as f:
            f.write(bench_csv(rows))
    except OSError as e:
        raise DatasetIOError(f"cannot write bench results ({e.strerror})", path)

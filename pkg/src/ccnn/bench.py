"""Forward-pass throughput benchmark."""
from __future__ import annotations

import platform
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ModelParams, forward


@contextmanager
def thread_limit(threads: int | None):
    """Cap BLAS/OpenMP threads for the duration of the block."""
    if threads is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        yield


@dataclass
class BenchReport:
    image_size: tuple[int, int]
    warmup_runs: int
    timed_runs: int
    latencies: list[float]
    thread_count: int | None
    build: dict = field(default_factory=dict)

    @property
    def total_time(self) -> float:
        return float(sum(self.latencies))

    @property
    def fps(self) -> float:
        return self.timed_runs / self.total_time

    def to_dict(self) -> dict:
        lat = np.asarray(self.latencies)
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d.update(
            fps=self.fps,
            total_time=self.total_time,
            mean_latency=float(lat.mean()),
            median_latency=float(np.median(lat)),
            p95_latency=float(np.percentile(lat, 95)),
        )
        return d


def build_metadata() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "processor": platform.processor() or platform.machine(),
        "system": platform.system(),
    }


def bench_forward(params: ModelParams, image_size=(768, 1024), warmup: int = 5, runs: int = 50,
                  threads: int | None = 1, seed: int = 0) -> BenchReport:
    """Time ``runs`` batch-1 forwards on a fixed random image after ``warmup`` untimed ones."""
    h, w = image_size
    f = params.config.downsampling
    if h % f or w % f:
        raise ValueError(f"benchmark size {h}x{w} must be divisible by {f}")
    if runs < 1 or warmup < 0:
        raise ValueError(f"need runs >= 1 and warmup >= 0, got runs={runs}, warmup={warmup}")
    image = np.random.default_rng(seed).random((1, params.config.input_channels, h, w), dtype=np.float32)
    latencies = []
    with thread_limit(threads):
        for _ in range(warmup):
            forward(params, image)
        for _ in range(runs):
            t0 = time.perf_counter()
            forward(params, image)
            latencies.append(time.perf_counter() - t0)
    return BenchReport((h, w), warmup, runs, latencies, threads, build_metadata())

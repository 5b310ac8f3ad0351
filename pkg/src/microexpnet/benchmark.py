"""Single-image CPU inference latency measurement.

Timing covers the forward pass only; the input tensor is materialized
before the loop, mirroring a deployment where preprocessing happens
upstream. The BLAS thread pool is limited to one thread and the process
is pinned to one core (where the platform allows) so numbers are about
the model, not the scheduler.
"""

from __future__ import annotations

import os
import platform
import time
from contextlib import ExitStack
from dataclasses import dataclass

import numpy as np

from .architecture import INPUT_CHANNELS, INPUT_SIZE, Model, count_parameters
from .errors import ValidationError

MIN_ITERATIONS = 100


@dataclass
class BenchReport:
    size_class: str
    variant: str
    parameters: int
    iterations: int
    warmup: int
    mean_ms: float
    median_ms: float
    p99_ms: float
    fps: float
    threads: int
    pinned: bool
    blas_single_thread: bool
    host: str
    timing_note: str = "forward pass only; input preparation excluded"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def host_descriptor() -> str:
    name = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.lower().startswith("model name"):
                    name = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return f"{name} ({os.cpu_count()} logical cores, {platform.system()} {platform.machine()})"


def _pin_to_one_core() -> tuple[bool, object]:
    if not hasattr(os, "sched_setaffinity"):
        return False, None
    try:
        previous = os.sched_getaffinity(0)
        os.sched_setaffinity(0, {min(previous)})
        return True, previous
    except OSError:
        return False, None


def bench_inference(model: Model, iterations: int = 1000, warmup: int = 50) -> BenchReport:
    """Time single-image forwards; returns latency statistics in
    milliseconds plus the conditions they were measured under.

    Fewer than 100 iterations would make percentiles meaningless, so that
    is rejected outright.
    """
    if iterations < MIN_ITERATIONS:
        raise ValidationError(
            f"iterations must be at least {MIN_ITERATIONS}, got {iterations}"
        )
    if warmup < 0:
        raise ValidationError(f"warmup must be non-negative, got {warmup}")
    rng = np.random.default_rng(12345)
    x = rng.random((INPUT_SIZE, INPUT_SIZE, INPUT_CHANNELS), dtype=np.float32)
    pinned, previous = _pin_to_one_core()
    limited = False
    elapsed_ns = np.empty(iterations, dtype=np.float64)
    try:
        with ExitStack() as stack:
            try:
                from threadpoolctl import threadpool_limits

                stack.enter_context(threadpool_limits(limits=1))
                limited = True
            except ImportError:
                pass
            for _ in range(warmup):
                model.forward(x)
            for i in range(iterations):
                start = time.perf_counter_ns()
                model.forward(x)
                elapsed_ns[i] = time.perf_counter_ns() - start
    finally:
        if pinned:
            os.sched_setaffinity(0, previous)
    ms = elapsed_ns / 1e6
    mean_ms = float(ms.mean())
    return BenchReport(
        size_class=model.spec.size_class.value,
        variant=model.spec.variant.value,
        parameters=count_parameters(model.spec),
        iterations=iterations,
        warmup=warmup,
        mean_ms=mean_ms,
        median_ms=float(np.median(ms)),
        p99_ms=float(np.percentile(ms, 99)),
        fps=1000.0 / mean_ms,
        threads=1,
        pinned=pinned,
        blas_single_thread=limited,
        host=host_descriptor(),
    )

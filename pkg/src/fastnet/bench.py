"""CPU inference throughput for the sequential network.

Each worker thread runs infer-mode forwards over its own synthetic batch
against a shared, read-only model. BLAS is pinned to one thread per worker
so ``threads`` is the true degree of parallelism.
"""

import threading
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .network import network_forward
from .tensor_core import DTYPE, make_rng

CSV_HEADER = "batch,threads,images_per_sec,p50_ms,p95_ms"


@dataclass(frozen=True)
class BenchResult:
    batch: int
    threads: int
    images_per_sec: float
    p50_ms: float
    p95_ms: float

    def csv(self):
        return f"{self.batch},{self.threads},{self.images_per_sec:.2f},{self.p50_ms:.3f},{self.p95_ms:.3f}"


def run_bench(model, batch, threads, seconds, warmup=3, seed=0):
    if batch < 1 or threads < 1:
        raise ValueError("batch and threads must be positive")
    if seconds <= 0:
        raise ValueError("seconds must be positive")
    if warmup < 3:
        raise ValueError("at least 3 warmup batches are required")
    spec = model.spec
    shape = (batch, spec.in_channels, spec.input_size, spec.input_size)
    inputs = [make_rng(seed, w).standard_normal(shape).astype(DTYPE) for w in range(threads)]
    latencies = [[] for _ in range(threads)]
    ready = threading.Barrier(threads + 1)
    start_flag = threading.Event()
    deadline = [0.0]

    def worker(w):
        x = inputs[w]
        for _ in range(warmup):
            network_forward(model, x, "infer")
        ready.wait()
        start_flag.wait()
        while True:
            t0 = time.perf_counter()
            if t0 >= deadline[0]:
                break
            network_forward(model, x, "infer")
            latencies[w].append(time.perf_counter() - t0)

    with threadpool_limits(limits=1):
        pool = [threading.Thread(target=worker, args=(w,), daemon=True) for w in range(threads)]
        for t in pool:
            t.start()
        ready.wait()
        t_start = time.perf_counter()
        deadline[0] = t_start + seconds
        start_flag.set()
        for t in pool:
            t.join()
        elapsed = time.perf_counter() - t_start

    lat = np.concatenate([np.asarray(l) for l in latencies]) * 1e3
    if lat.size == 0:
        raise RuntimeError("no batch finished inside the measurement window; raise --seconds")
    return BenchResult(
        batch=batch,
        threads=threads,
        images_per_sec=lat.size * batch / elapsed,
        p50_ms=float(np.percentile(lat, 50)),
        p95_ms=float(np.percentile(lat, 95)),
    )

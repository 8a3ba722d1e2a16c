"""Per-sample inference latency at a fixed batch size, warm-up excluded."""
from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAX_TIMER_RESOLUTION = 1e-6


@dataclass
class BenchResult:
    label: str
    batch_size: int
    warmup_batches: int
    measured_batches: int
    median_ms: float
    p10_ms: float
    p90_ms: float
    steps: int | None
    precision: str
    threads: int = 1
    relative_change: float | None = None
    per_batch_ms: list[float] = field(default_factory=list, repr=False)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("per_batch_ms")
        return d


def check_timer() -> float:
    info = time.get_clock_info("perf_counter")
    if not info.monotonic:
        raise RuntimeError("perf_counter is not monotonic on this platform")
    if info.resolution > MAX_TIMER_RESOLUTION:
        raise RuntimeError(f"timer resolution {info.resolution}s is coarser than 1us")
    return info.resolution


def _batch_features(features: np.ndarray, b: int, batch_size: int) -> np.ndarray:
    idx = (np.arange(batch_size) + b * batch_size) % len(features)
    return features[idx]


def _batch_seed(seed: int, b: int) -> int:
    return int(np.random.SeedSequence([seed, b]).generate_state(1)[0])


def run_batch(generator, feats: np.ndarray, seed: int, steps: int | None, threads: int, pool=None) -> np.ndarray:
    if threads <= 1:
        return generator.sample(feats, seed=seed, steps=steps, batch_size=len(feats))
    shards = np.array_split(np.arange(len(feats)), threads)
    futs = [
        pool.submit(generator.sample, feats[s], _batch_seed(seed, i), steps, max(len(s), 1))
        for i, s in enumerate(shards)
    ]
    return np.concatenate([f.result() for f in futs])


def bench_inference(
    generator,
    features,
    batch_size: int = 256,
    warmup: int = 5,
    batches: int = 20,
    steps: int | None = None,
    precision: str = "float32",
    seed: int = 0,
    label: str = "",
    threads: int = 1,
    keep_outputs: bool = False,
):
    """Time ``batches`` end-to-end sampling calls (noise, Euler steps, decode, inverse transform).

    Sample content of measured batch ``b`` depends only on ``(seed, b)``, so
    warm-up never changes outputs. Returns the result, plus the outputs when
    ``keep_outputs`` is set.
    """
    if batches < 1:
        raise ValueError("batches must be >= 1")
    check_timer()
    features = np.asarray(features)
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for w in range(warmup):
            run_batch(generator, _batch_features(features, w, batch_size), _batch_seed(seed + 1, w), steps, threads, pool)
        times, outputs = [], []
        for b in range(batches):
            feats = _batch_features(features, b, batch_size)
            t0 = time.perf_counter()
            out = run_batch(generator, feats, _batch_seed(seed, b), steps, threads, pool)
            times.append(time.perf_counter() - t0)
            if keep_outputs:
                outputs.append(out)
    finally:
        if pool is not None:
            pool.shutdown()
    per_sample = np.array(times) / batch_size * 1e3
    res = BenchResult(
        label=label,
        batch_size=batch_size,
        warmup_batches=warmup,
        measured_batches=batches,
        median_ms=float(np.median(per_sample)),
        p10_ms=float(np.percentile(per_sample, 10)),
        p90_ms=float(np.percentile(per_sample, 90)),
        steps=steps if steps is not None else getattr(generator, "default_steps", None),
        precision=precision,
        threads=threads,
        per_batch_ms=[t * 1e3 for t in times],
    )
    return (res, outputs) if keep_outputs else res


def ladder_report(results: list[BenchResult]) -> list[BenchResult]:
    """Fill in the change of median latency relative to the previous row, in percent."""
    if len(results) < 2:
        raise ValueError("a ladder needs at least two rows")
    results[0].relative_change = None
    for prev, cur in zip(results[:-1], results[1:]):
        cur.relative_change = 100.0 * (cur.median_ms - prev.median_ms) / prev.median_ms
    return results


LADDER_COLUMNS = [
    "label", "batch_size", "warmup_batches", "measured_batches", "median_ms", "p10_ms", "p90_ms",
    "steps", "precision", "threads", "relative_change",
]


def write_ladder(results: list[BenchResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=LADDER_COLUMNS)
        wr.writeheader()
        for r in results:
            wr.writerow(r.row())
    return path

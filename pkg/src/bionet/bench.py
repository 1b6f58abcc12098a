"""Matching throughput benchmark with multi-process scaling.

Builds a seeded gallery, times repeated full-gallery identifications, and
reports the sustained pairwise comparison rate plus the speedup of N worker
processes over one. Workers receive the gallery by fork inheritance and each
scores a contiguous slice; per-pair scores do not depend on the slicing, so
outcomes are asserted bit-identical across worker counts.
"""

from __future__ import annotations

import math
import multiprocessing
import random
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from .matcher import (
    CylinderSet,
    GalleryBlock,
    IdentificationResult,
    MatcherParams,
    build_cylinders,
    decide,
    score_block,
)
from .templates import PerturbationParams, generate_template, perturb

_PROBE_NOISE = PerturbationParams(pos_sigma=4.0, angle_sigma=math.radians(5),
                                  dropout_prob=0.1, spurious_count=2)

# fork-inherited worker state: (sub-blocks, params)
_WORKER_BLOCKS: list[GalleryBlock] = []
_WORKER_PARAMS: Optional[MatcherParams] = None


def _scan_slice(args: tuple[CylinderSet, int]) -> list[Optional[float]]:
    probe, block_index = args
    return score_block(probe, _WORKER_BLOCKS[block_index], _WORKER_PARAMS)


@dataclass
class BenchReport:
    store_size: int
    workers: int
    probes: int
    rounds: int
    matches_per_second: float
    baseline_matches_per_second: float
    speedup_vs_one_worker: float
    elapsed_s: float
    outcomes_identical: bool
    results: list[IdentificationResult] = field(repr=False, default_factory=list)

    def summary(self) -> dict:
        return {
            "store_size": self.store_size,
            "workers": self.workers,
            "probes": self.probes,
            "rounds": self.rounds,
            "matches_per_second": round(self.matches_per_second),
            "baseline_matches_per_second": round(self.baseline_matches_per_second),
            "speedup_vs_one_worker": round(self.speedup_vs_one_worker, 3),
            "outcomes_identical": self.outcomes_identical,
        }


def build_bench_gallery(store_size: int, seed: int, params: MatcherParams,
                        minutiae: int = 32) -> tuple[list[bytes], list[CylinderSet], list[CylinderSet]]:
    """Seeded gallery plus probe set (perturbed copies of gallery entries)."""
    rng = random.Random(seed)
    ids, sets = [], []
    for i in range(store_size):
        ids.append(rng.randbytes(16))
        sets.append(build_cylinders(generate_template(seed=rng.getrandbits(63),
                                                      n=minutiae), params))
    probes = []
    for _ in range(4):
        source = sets[rng.randrange(store_size)].template
        probes.append(build_cylinders(perturb(source, _PROBE_NOISE,
                                              seed=rng.getrandbits(63)), params))
    return ids, sets, probes


def _run_identifications(ids: list[bytes], blocks: list[GalleryBlock],
                         probes: list[CylinderSet], rounds: int, workers: int,
                         params: MatcherParams) -> tuple[list[IdentificationResult], float]:
    """Time `rounds` passes of every probe over the full gallery."""
    global _WORKER_BLOCKS, _WORKER_PARAMS
    results: list[IdentificationResult] = []
    if workers <= 1:
        start = time.perf_counter()
        for _ in range(rounds):
            results = []
            for probe in probes:
                scores: list[Optional[float]] = []
                for block in blocks:
                    scores.extend(score_block(probe, block, params))
                candidates = [(ids[i], s) for i, s in enumerate(scores) if s is not None]
                results.append(decide(candidates, len(ids), params))
        return results, time.perf_counter() - start

    _WORKER_BLOCKS = blocks
    _WORKER_PARAMS = params
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        # warm the pool so process startup stays out of the timing
        list(pool.map(_scan_slice, [(probes[0], 0)]))
        start = time.perf_counter()
        for _ in range(rounds):
            results = []
            for probe in probes:
                parts = pool.map(_scan_slice, [(probe, b) for b in range(len(blocks))])
                scores = [s for part in parts for s in part]
                candidates = [(ids[i], s) for i, s in enumerate(scores) if s is not None]
                results.append(decide(candidates, len(ids), params))
        elapsed = time.perf_counter() - start
    return results, elapsed


def _calibration_burn(rounds: int = 150) -> float:
    import numpy as np
    rng = np.random.default_rng(0)
    a = rng.integers(0, 2 ** 63, (35, 1, 6), dtype=np.uint64)
    b = rng.integers(0, 2 ** 63, (1, 1024, 6), dtype=np.uint64)
    acc = 0.0
    for _ in range(rounds):
        acc += float(np.sqrt(np.bitwise_count(a & b)
                             .sum(2, dtype=np.uint16).astype(np.float64)).sum())
    return acc


def host_parallel_capacity(workers: int) -> float:
    """Measured speedup of `workers` concurrent kernel burns over one.

    Scheduler-shared or hyperthreaded hosts return well under `workers`;
    callers use this to tell an implementation problem from a host limit.
    """
    start = time.perf_counter()
    _calibration_burn()
    single = time.perf_counter() - start
    ctx = multiprocessing.get_context("fork")
    procs = [ctx.Process(target=_calibration_burn) for _ in range(workers)]
    start = time.perf_counter()
    for p in procs:
        p.start()
    for p in procs:
        p.join()
    wall = time.perf_counter() - start
    return workers * single / max(wall, 1e-9)


def bench_match(store_size: int, workers: int, seed: int,
                params: Optional[MatcherParams] = None,
                rounds: Optional[int] = None) -> BenchReport:
    """Measure sustained match rate and the speedup of `workers` processes."""
    if store_size < 1:
        raise ValueError("store_size must be >= 1")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    params = params or MatcherParams()
    ids, sets, probes = build_bench_gallery(store_size, seed, params)
    if rounds is None:
        rounds = max(1, 40_000 // (store_size * len(probes)))

    # slice the gallery into one contiguous block per worker
    slices = [(store_size * w // workers, store_size * (w + 1) // workers)
              for w in range(max(workers, 1))]
    blocks = [GalleryBlock.build(sets[lo:hi], params.min_valid_cylinders)
              for lo, hi in slices if hi > lo]

    base_results, base_elapsed = _run_identifications(
        ids, blocks, probes, rounds, workers=1, params=params)
    if workers == 1:
        rate = store_size * len(probes) * rounds / max(base_elapsed, 1e-9)
        return BenchReport(store_size, 1, len(probes), rounds, rate, rate, 1.0,
                           base_elapsed, True, base_results)

    par_results, par_elapsed = _run_identifications(
        ids, blocks, probes, rounds, workers=workers, params=params)
    comparisons = store_size * len(probes) * rounds
    return BenchReport(
        store_size=store_size, workers=workers, probes=len(probes), rounds=rounds,
        matches_per_second=comparisons / max(par_elapsed, 1e-9),
        baseline_matches_per_second=comparisons / max(base_elapsed, 1e-9),
        speedup_vs_one_worker=base_elapsed / max(par_elapsed, 1e-9),
        elapsed_s=par_elapsed,
        outcomes_identical=par_results == base_results,
        results=par_results,
    )

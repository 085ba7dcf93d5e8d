"""Cost and wall-clock comparison of local and dense attention."""
from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from . import lak
from .tensor.core import Tensor


@dataclass
class BenchRow:
    mode: str
    height: int
    width: int
    channels: int
    radius: int
    macs: int
    map_elements: int
    wall_ms: float
    peak_bytes: int


def _measure(fn) -> tuple[float, int, lak.OpCostReport]:
    tracemalloc.start()
    tracemalloc.reset_peak()
    t0 = time.perf_counter()
    with lak.count_ops() as counts:
        fn()
    ms = (time.perf_counter() - t0) * 1e3
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return ms, peak, counts


def bench_case(
    height: int,
    width: int,
    channels: int,
    radius: int,
    mode: str,
    seed: int = 0,
    budget: int = lak.DEFAULT_ORACLE_BUDGET,
) -> BenchRow:
    """One attention evaluation; counters come from the instrumented kernels, not formulas."""
    rng = np.random.default_rng(seed)
    q, k, v = (rng.standard_normal((1, channels, height, width)) for _ in range(3))
    if mode == "local":
        def run():
            lak.lak_fused(Tensor(q), Tensor(k), Tensor(v), channels, radius)
    elif mode == "global":
        def run():
            lak.global_attention_oracle(q, k, v, channels, radius=None, max_elements=budget)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    run()  # warm-up (kernel compilation, caches)
    ms, peak, counts = _measure(run)
    return BenchRow(mode, height, width, channels, radius, counts.multiply_accumulate_count,
                    counts.attention_map_elements, ms, peak)


def cascade_grids(size: int, levels: int) -> list[tuple[int, int, int]]:
    """(grid side, level, radius) for every level of a ``levels``-scale model at ``size`` x ``size``."""
    return [(size // 2 ** (levels - k + 1), k, k + 1) for k in range(1, levels + 1)]


def bench_cascade(
    size: int, levels: int, channels: int, modes: Iterable[str] = ("local", "global"),
    budget: int = lak.DEFAULT_ORACLE_BUDGET, seed: int = 0,
) -> list[BenchRow]:
    rows = []
    for mode in modes:
        for side, _, r in cascade_grids(size, levels):
            rows.append(bench_case(side, side, channels, r, mode, seed, budget))
    return rows


def totals(rows: Iterable[BenchRow], mode: Optional[str] = None) -> dict[str, float]:
    sel = [r for r in rows if mode is None or r.mode == mode]
    return {
        "macs": sum(r.macs for r in sel),
        "map_elements": sum(r.map_elements for r in sel),
        "wall_ms": sum(r.wall_ms for r in sel),
        "peak_bytes": max((r.peak_bytes for r in sel), default=0),
    }

"""Wall-clock scaling of :func:`~tmmsb.inference.fit` over an (M, N, K) grid."""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import SimulationConfig, sample_network
from .inference import FitConfig, fit

MIN_POINTS = 6


@dataclass(frozen=True)
class BenchPoint:
    m: int
    n: int
    k: int
    seconds: float  # median over repeats
    iterations: int


@dataclass(frozen=True)
class ScalingFit:
    """``log t = intercept + e_M log M + e_N log N + e_K log K``."""

    intercept: float
    exponents: dict
    r2: float

    def to_dict(self) -> dict:
        return {"intercept": self.intercept, "exponents": dict(self.exponents), "r2": self.r2}


def bench_network(m: int, n: int, k: int, seed: int = 0):
    """Assortative test network: 0.3 within groups, 0.02 across."""
    b = np.full((k, k), 0.02)
    np.fill_diagonal(b, 0.3)
    return sample_network(SimulationConfig(m=m, n=n, k=k, alpha=0.1, b=b, seed=seed)).log


def run_grid(m_values: Sequence[int], n_values: Sequence[int], k_values: Sequence[int],
             fit_config: FitConfig, repeats: int = 1, seed: int = 0, fixed_iters: int = 0,
             progress=None) -> list:
    """Fit every grid cell ``repeats`` times and keep the median wall time.

    By default each fit runs to convergence, so the timings include how the
    number of iterations grows with the problem size.  ``fixed_iters > 0``
    instead runs exactly that many outer iterations of one inner sweep each,
    timing the per-sweep cost alone.

    Raises ``ValueError`` when the grid has fewer than :data:`MIN_POINTS`
    cells, since the three-exponent regression would be under-determined
    or close to it.
    """
    grid = list(itertools.product(m_values, n_values, k_values))
    if len(grid) < MIN_POINTS:
        raise ValueError(f"bench grid has {len(grid)} points; need at least {MIN_POINTS}")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if fixed_iters > 0:
        # a zero-width tolerance: only an exactly repeated bound stops early
        fit_config = replace(fit_config, max_outer_iters=fixed_iters, max_inner_iters=1,
                             rel_tol=np.finfo(float).tiny)
    points = []
    for m, n, k in grid:
        log = bench_network(m, n, k, seed)
        times, iters = [], 0
        for r in range(repeats):
            cfg = replace(fit_config, k=k, seed=seed + r)
            start = time.perf_counter()
            model = fit(log, cfg)
            times.append(time.perf_counter() - start)
            iters = model.iterations
        points.append(BenchPoint(m, n, k, float(np.median(times)), iters))
        if progress is not None:
            progress(points[-1])
    return points


def scaling_regression(points: Sequence[BenchPoint]) -> ScalingFit:
    """Least-squares fit of log time on log M, log N and log K."""
    if len(points) < MIN_POINTS:
        raise ValueError(f"need at least {MIN_POINTS} points, got {len(points)}")
    x = np.log([[p.m, p.n, p.k] for p in points], dtype=np.float64)
    y = np.log([p.seconds for p in points])
    design = np.column_stack([np.ones(len(y)), x])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    total = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - (resid @ resid) / total if total > 0 else 0.0
    return ScalingFit(float(coef[0]), {"M": float(coef[1]), "N": float(coef[2]), "K": float(coef[3])},
                      float(r2))


def doubling_ratios(points: Sequence[BenchPoint]) -> dict:
    """Median time ratio when doubling K (resp. N) with the other sizes fixed."""
    t = {(p.m, p.n, p.k): p.seconds for p in points}

    def ratio(axis: int):
        out = []
        for key, sec in t.items():
            other = list(key)
            other[axis] *= 2
            if tuple(other) in t:
                out.append(t[tuple(other)] / sec)
        return float(np.median(out)) if out else float("nan")

    return {"N": ratio(1), "K": ratio(2)}

"""Wall-clock scaling of the fast layer against the pairwise reference layer."""

from __future__ import annotations

import csv
import statistics
import timeit
from dataclasses import dataclass
from pathlib import Path

import torch

from .graph import random_graph
from .layers import RankformerConfig, rankformer_layer
from .oracle import naive_layer


@dataclass
class BenchPoint:
    sweep: str
    impl: str  # "fast" or "naive"
    n: int
    m: int
    E: int
    d: int
    median_s: float
    spread: float  # (max - min) / median over repeats


@dataclass(frozen=True)
class BenchGrid:
    d: int = 16
    # E-doubling sweep: fixed n, m, d
    edge_n: int = 4000
    edge_m: int = 4000
    edge_E: tuple[int, ...] = (200_000, 400_000)
    # item sweep: fixed n, E, d; m grows by 4x steps. A small d keeps the
    # fast layer's m*d^2 term below its E*d term, where the asymptotic
    # advantage over the pairwise layer is visible.
    item_d: int = 4
    item_n: int = 100
    item_E: int = 10_000
    item_m: tuple[int, ...] = (200, 800, 3200)
    repeats: int = 9


SMALL_GRID = BenchGrid(
    edge_n=2000, edge_m=2000, edge_E=(100_000, 200_000), item_n=50, item_E=2500, item_m=(100, 400, 1600), repeats=7
)


def _time_interleaved(fns, repeats: int) -> list[tuple[float, float]]:
    """Median per-call wall time and relative spread of each callable.

    Each sample loops a callable ``timeit``-style until it lasts at least
    0.2 s, which keeps millisecond-scale calls above timer and scheduler
    jitter. Repeats run round-robin across ``fns`` so that transient machine
    load affects every grid point of a sweep alike.
    """
    timers = [timeit.Timer(fn) for fn in fns]
    loops = [t.autorange()[0] for t in timers]  # also warms up
    times = [[] for _ in fns]
    for _ in range(repeats):
        for t, number, acc in zip(timers, loops, times):
            acc.append(t.timeit(number) / number)
    out = []
    for acc in times:
        med = statistics.median(acc)
        out.append((med, (max(acc) - min(acc)) / med))
    return out


def _layer_call(g, Z, cfg):
    return lambda: rankformer_layer(g, Z, cfg)


def run_bench(grid: BenchGrid = BenchGrid(), include_naive: bool = True) -> list[BenchPoint]:
    cfg = RankformerConfig(tau=0.5, alpha=2.0)
    points = []
    gen = torch.Generator()

    edge_graphs = [random_graph(grid.edge_n, grid.edge_m, E, seed=E) for E in grid.edge_E]
    edge_Z = [torch.randn(g.n + g.m, grid.d, dtype=torch.float64, generator=gen.manual_seed(0)) for g in edge_graphs]
    timings = _time_interleaved([_layer_call(g, Z, cfg) for g, Z in zip(edge_graphs, edge_Z)], grid.repeats)
    for g, (med, spread) in zip(edge_graphs, timings):
        points.append(BenchPoint("edges", "fast", g.n, g.m, g.E, grid.d, med, spread))

    item_graphs = [random_graph(grid.item_n, m, grid.item_E, seed=m) for m in grid.item_m]
    item_Z = [torch.randn(g.n + g.m, grid.item_d, dtype=torch.float64, generator=gen.manual_seed(0)) for g in item_graphs]
    fast = _time_interleaved([_layer_call(g, Z, cfg) for g, Z in zip(item_graphs, item_Z)], grid.repeats)
    if include_naive:
        naive = _time_interleaved(
            [(lambda g=g, Zn=Z.numpy(): naive_layer(g, Zn, cfg)) for g, Z in zip(item_graphs, item_Z)],
            grid.repeats,
        )
    for k, g in enumerate(item_graphs):
        points.append(BenchPoint("items", "fast", g.n, g.m, g.E, grid.item_d, *fast[k]))
        if include_naive:
            points.append(BenchPoint("items", "naive", g.n, g.m, g.E, grid.item_d, *naive[k]))
    return points


@dataclass
class ScalingVerdict:
    name: str
    value: float
    lo: float
    hi: float

    @property
    def passed(self) -> bool:
        return self.lo <= self.value <= self.hi


def check_scaling(points: list[BenchPoint]) -> list[ScalingVerdict]:
    """Scaling properties of a :func:`run_bench` result.

    * fast layer, E doubled at fixed n, m, d: time ratio in [1.3, 2.5]
    * fast layer, m x4 at fixed n, E, d: time ratio < 8 per step
    * naive layer, m x4: time ratio in [2.4, 6.4] per step (proportional to n*m)
    * naive/fast time ratio grows >= 3x per m x4 step
    * naive layer over the whole m sweep (x16): ratio >= 10
    """
    out = []
    edge = [p for p in points if p.sweep == "edges"]
    for a, b in zip(edge, edge[1:]):
        out.append(ScalingVerdict(f"fast E x{b.E / a.E:g} ({a.E}->{b.E})", b.median_s / a.median_s, 1.3, 2.5))
    fast = [p for p in points if p.sweep == "items" and p.impl == "fast"]
    naive = [p for p in points if p.sweep == "items" and p.impl == "naive"]
    for a, b in zip(fast, fast[1:]):
        out.append(ScalingVerdict(f"fast m x{b.m / a.m:g} ({a.m}->{b.m})", b.median_s / a.median_s, 0.0, 8.0))
    for a, b in zip(naive, naive[1:]):
        r = b.m / a.m
        out.append(ScalingVerdict(f"naive m x{r:g} ({a.m}->{b.m})", b.median_s / a.median_s, 0.6 * r, 1.6 * r))
    for (fa, na), (fb, nb) in zip(zip(fast, naive), zip(fast[1:], naive[1:])):
        growth = (nb.median_s / fb.median_s) / (na.median_s / fa.median_s)
        out.append(ScalingVerdict(f"naive/fast advantage growth ({fa.m}->{fb.m})", growth, 3.0, float("inf")))
    if len(naive) >= 3:
        out.append(ScalingVerdict(
            f"naive m x{naive[-1].m / naive[0].m:g} overall", naive[-1].median_s / naive[0].median_s, 10.0, float("inf")
        ))
    return out


def write_bench_csv(path: str | Path, points: list[BenchPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sweep", "impl", "n", "m", "E", "d", "median_seconds", "spread"])
        for p in points:
            w.writerow([p.sweep, p.impl, p.n, p.m, p.E, p.d, f"{p.median_s:.6f}", f"{p.spread:.3f}"])

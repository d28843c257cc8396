import csv

import pytest

from rankformer.bench import BenchGrid, BenchPoint, check_scaling, run_bench, write_bench_csv


def synthetic(edge_ratio, fast_m_ratio, naive_m_ratio):
    pts = [
        BenchPoint("edges", "fast", 10, 10, 100, 4, 1.0, 0.1),
        BenchPoint("edges", "fast", 10, 10, 200, 4, edge_ratio, 0.1),
    ]
    for k, m in enumerate((10, 40, 160)):
        pts.append(BenchPoint("items", "fast", 5, m, 50, 2, fast_m_ratio**k, 0.1))
        pts.append(BenchPoint("items", "naive", 5, m, 50, 2, naive_m_ratio**k, 0.1))
    return pts


def test_ideal_scaling_passes():
    verdicts = check_scaling(synthetic(2.0, 1.1, 4.0))
    assert len(verdicts) == 8 and all(v.passed for v in verdicts)


@pytest.mark.parametrize(
    "ratios,failing",
    [
        ((2.6, 1.1, 4.0), "fast E"),
        ((1.2, 1.1, 4.0), "fast E"),
        ((2.0, 9.0, 4.0), "fast m"),
        ((2.0, 1.1, 7.0), "naive m x4"),
        ((2.0, 2.0, 4.0), "advantage"),
        ((2.0, 1.0, 3.0), "naive m x16"),
    ],
)
def test_each_property_can_fail(ratios, failing):
    failed = [v.name for v in check_scaling(synthetic(*ratios)) if not v.passed]
    assert any(failing in name for name in failed), failed


def test_tiny_grid_runs_and_writes_csv(tmp_path):
    grid = BenchGrid(d=4, edge_n=50, edge_m=50, edge_E=(200, 400), item_n=10, item_E=40, item_m=(20, 80), repeats=2)
    pts = run_bench(grid)
    assert [(p.sweep, p.impl) for p in pts] == [
        ("edges", "fast"), ("edges", "fast"),
        ("items", "fast"), ("items", "naive"), ("items", "fast"), ("items", "naive"),
    ]
    assert all(p.median_s > 0 and p.spread >= 0 for p in pts)
    write_bench_csv(tmp_path / "b.csv", pts)
    rows = list(csv.reader(open(tmp_path / "b.csv")))
    assert rows[0] == ["sweep", "impl", "n", "m", "E", "d", "median_seconds", "spread"] and len(rows) == 7


def test_fast_only_grid():
    grid = BenchGrid(d=2, edge_n=20, edge_m=20, edge_E=(40, 80), item_n=5, item_E=10, item_m=(8, 32), repeats=1)
    assert all(p.impl == "fast" for p in run_bench(grid, include_naive=False))

import math

import numpy as np
import pytest
from scipy import stats

from acc.data import MiSpec, generate
from acc.errors import InvalidArgumentError
from acc.eval import (
    coverage_experiment,
    expected_unique_categories,
    linear_probe,
    mi_sweep,
    probe_features,
    unique_category_count,
    worker_count,
)
from acc.training import TrainConfig, run
from oracles import expected_unique_enumerated

TINY = dict(M=8, K=32, N=128, m=0.9, tau=0.2, warmup_steps=5, hidden=(12,), repr_dim=6)


def test_unique_category_count():
    labels = np.array([0, 0, 1, 2, 2, 2])
    assert unique_category_count([0, 1, 3], labels) == 2
    assert unique_category_count([], labels) == 0
    with pytest.raises(IndexError):
        unique_category_count([6], labels)


@pytest.mark.parametrize("labels,m", [([0, 0, 1, 2, 2, 2, 3], 3), ([0, 1, 1, 1, 1, 2, 2, 3, 4], 4), ([5, 5, 5], 2)])
def test_expected_unique_matches_enumeration(labels, m):
    counts = np.bincount(labels)
    counts = counts[counts > 0]
    assert math.isclose(expected_unique_categories(counts, m), expected_unique_enumerated(labels, m), rel_tol=1e-10)


def test_expected_unique_bounds():
    assert expected_unique_categories([10] * 34, 340) == pytest.approx(34)
    with pytest.raises(InvalidArgumentError):
        expected_unique_categories([1, 1], 3)


def test_probe_constant_labels():
    x = np.random.default_rng(0).normal(size=(50, 3))
    res = probe_features(x, np.zeros(50, dtype=int), split_seed=0)
    assert res.test_accuracy == 1.0


def test_probe_random_features_at_chance():
    rng = np.random.default_rng(1)
    n, c = 2500, 5
    x = rng.normal(size=(n, 8))
    y = np.arange(n) % c
    res = probe_features(x, y, split_seed=0)
    n_test = n - int(round(0.8 * n))
    lo, hi = stats.binom.interval(0.999, n_test, 1 / c)
    assert lo / n_test <= res.test_accuracy <= hi / n_test


def test_probe_separable_and_deterministic():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 3, size=300)
    x = np.eye(3)[y] * 5 + rng.normal(size=(300, 3)) * 0.1
    a = probe_features(x, y, split_seed=4)
    b = probe_features(x, y, split_seed=4)
    assert a.test_accuracy == b.test_accuracy == 1.0
    assert a.per_task == b.per_task


def test_probe_multi_column_mean():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 2, size=(200, 2))
    x = np.hstack([y[:, :1] * 4.0, rng.normal(size=(200, 1))])
    res = probe_features(x, y, split_seed=0)
    assert len(res.per_task) == 2
    assert res.per_task[0][1] == 1.0
    assert res.test_accuracy == pytest.approx(np.mean([t for _, t in res.per_task]))


def test_probe_single_class_training_split():
    y = np.zeros(10, dtype=int)
    y[0] = 1
    x = np.arange(10.0)[:, None]
    # find a split seed whose training half lacks the lone positive
    for seed in range(100):
        perm = np.random.default_rng(seed).permutation(10)
        if 0 not in perm[:8]:
            with pytest.raises(InvalidArgumentError):
                probe_features(x, y, split_seed=seed)
            return
    pytest.fail("no suitable split seed found")


def test_small_instance_learns_linearly_decodable_embeddings():
    ds = generate(MiSpec(alphabet_sizes=(10,), dataset_size=1000, seed=0))
    cfg = TrainConfig(M=16, K=64, N=256, m=0.99, tau=0.1, warmup_steps=50, max_steps=400, epochs=7, hidden=(32,), repr_dim=8)
    bundle = run(cfg, ds, labels=False).state.bundle
    assert linear_probe(bundle, ds, split_seed=0).test_accuracy > 0.9


def test_coverage_experiment_shapes():
    ds = generate(MiSpec(alphabet_sizes=(12,), dataset_size=300, label_mode="coarse", skew=1.0))
    cfg = TrainConfig(**TINY)
    res = coverage_experiment(ds, cfg, samplers=("active", "random"), batch_sizes=(8,), steps=6, seeds=[0, 1])
    assert [(r.sampler, r.seed) for r in res] == [("active", 0), ("random", 0), ("active", 1), ("random", 1)]
    for r in res:
        assert len(r.counts) == 6
        assert np.all((r.counts >= 1) & (r.counts <= 8))
        assert np.all(r.fractions <= 1.0)
    assert res[0].embedding == "gradient" and res[1].embedding == "none"


def test_coverage_counts_shrink_under_coarser_labels():
    fine = generate(MiSpec(alphabet_sizes=(6, 5), dataset_size=300))
    coarse_labels = fine.chars[:, 0]
    h = run(TrainConfig(max_steps=6, **TINY), fine).history
    h_coarse = run(TrainConfig(max_steps=6, **TINY), fine, labels=coarse_labels).history
    for a, b in zip(h, h_coarse):
        assert b.selected_unique_v <= a.selected_unique_v


def test_mi_sweep_one_row_and_worker_invariance():
    spec = MiSpec(alphabet_sizes=(6,), dataset_size=300)
    cfg = TrainConfig(**TINY)
    rows = mi_sweep([spec], cfg, samplers=("active",), steps=10, workers=1)
    assert len(rows) == 1 and rows[0]["e_mi"] == pytest.approx(6.0)
    two = mi_sweep([spec, MiSpec(alphabet_sizes=(6, 4), dataset_size=300)], cfg, samplers=("active", "random"), steps=10, workers=1)
    par = mi_sweep([spec, MiSpec(alphabet_sizes=(6, 4), dataset_size=300)], cfg, samplers=("active", "random"), steps=10, workers=2)
    assert two == par
    assert [(r["slots"], r["sampler"]) for r in two] == [(1, "active"), (1, "random"), (2, "active"), (2, "random")]


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("ACC_THREADS", "1")
    assert worker_count() == 1
    monkeypatch.setenv("ACC_THREADS", "junk")
    assert worker_count() >= 1


def test_random_coverage_matches_combinatorial_expectation():
    ds = generate(MiSpec(alphabet_sizes=(34,), dataset_size=3400, label_mode="coarse", seed=0))
    counts = np.bincount(ds.category_labels)
    cfg = TrainConfig(**dict(TINY, K=128, N=256))
    res = coverage_experiment(ds, cfg, samplers=("random",), batch_sizes=(128,), steps=100, seeds=[0])
    observed = res[0].counts
    expected = expected_unique_categories(counts, 128)
    # per-batch counts are independent draws; allow four standard errors
    se = observed.std(ddof=1) / math.sqrt(len(observed))
    assert abs(observed.mean() - expected) < 4 * max(se, 0.05)

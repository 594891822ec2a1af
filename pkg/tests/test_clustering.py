import itertools
import warnings

import numpy as np
import pytest

from mspt.clustering import (
    KMeansConfig,
    StaleCacheError,
    _lloyd,
    cache_prototypes,
    extract_all,
    extract_prototypes,
    kmeans_fit,
    kmeanspp_init,
    load_prototypes,
)
from mspt.data import ConfigError, Dataset, MultiScaleBag, SyntheticConfig, generate_synthetic


def best_partition_objective(X: np.ndarray, K: int) -> float:
    """Global K-means optimum by enumerating every labelling into K non-empty groups."""
    best = np.inf
    for labels in itertools.product(range(K), repeat=len(X)):
        labels = np.asarray(labels)
        if len(set(labels.tolist())) != K:
            continue
        sse = sum(((X[labels == k] - X[labels == k].mean(0)) ** 2).sum() for k in range(K))
        best = min(best, sse)
    return float(best)


def test_partition_oracle_counts_seven_two_way_splits():
    X = np.array([[0.0, 0], [1, 0], [0, 1], [5, 5]])
    seen = {frozenset(np.flatnonzero(np.array(l) == 0)) for l in itertools.product(range(2), repeat=4)
            if len(set(l)) == 2}
    assert len({min(s, frozenset(range(4)) - s, key=sorted) for s in seen}) == 7
    assert best_partition_objective(X, 2) == pytest.approx(4 / 3)


def test_kmeanspp_single_center_is_a_row():
    X = np.random.default_rng(0).standard_normal((10, 3))
    c = kmeanspp_init(X, 1, np.random.default_rng(4))
    assert any(np.array_equal(c[0], r) for r in X)


def test_kmeanspp_picks_all_distinct_rows():
    X = np.repeat(np.array([[0.0, 0], [3, 1], [-2, 5]]), [4, 1, 2], axis=0)
    for seed in range(20):
        c = kmeanspp_init(X, 3, np.random.default_rng(seed))
        assert len({tuple(r) for r in c}) == 3


def test_kmeanspp_seeded_and_too_many_centers():
    X = np.random.default_rng(0).standard_normal((6, 2))
    a = kmeanspp_init(X, 3, np.random.default_rng(9))
    b = kmeanspp_init(X, 3, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ConfigError):
        kmeanspp_init(X, 7, np.random.default_rng(0))


def test_kmeanspp_duplicate_fallback():
    X = np.zeros((5, 2))
    c = kmeanspp_init(X, 3, np.random.default_rng(0))
    assert c.shape == (3, 2)


def test_k1_is_column_mean():
    X = np.random.default_rng(1).standard_normal((30, 4))
    res = kmeans_fit(X, KMeansConfig(K=1, n_restarts=1))
    np.testing.assert_allclose(res.centers[0], X.mean(0), atol=1e-12)
    assert res.objective == pytest.approx(X.var(0).sum() * len(X), rel=1e-12)


def test_k_equals_n_has_zero_objective():
    X = np.random.default_rng(2).standard_normal((6, 3))
    res = kmeans_fit(X, KMeansConfig(K=6, n_restarts=3))
    assert res.objective == 0.0
    assert sorted(map(tuple, res.centers)) == sorted(map(tuple, X))


def test_four_points_global_optimum():
    X = np.array([[0.0, 0.0], [0.0, 1.0], [4.0, 0.0], [4.5, 1.0]])
    res = kmeans_fit(X, KMeansConfig(K=2, n_restarts=50, seed=0))
    assert res.objective == pytest.approx(best_partition_objective(X, 2), abs=1e-9)


def test_more_clusters_than_points_rejected():
    with pytest.raises(ConfigError):
        kmeans_fit(np.zeros((2, 2)), KMeansConfig(K=3))


def test_objective_non_increasing_and_centers_are_means():
    rng = np.random.default_rng(7)
    X = np.concatenate([rng.normal(m, 1, (40, 3)) for m in (-4, 0, 4)])
    init = kmeanspp_init(X, 3, rng)
    res = _lloyd(X, init, max_iters=200, tol=0.0)
    assert all(b <= a * (1 + 1e-12) for a, b in zip(res.history, res.history[1:]))
    for k in range(3):
        members = X[res.assignments == k]
        if len(members):
            np.testing.assert_allclose(res.centers[k], members.mean(0), atol=1e-9)


def test_empty_cluster_repaired_at_farthest_point():
    X = np.array([[0.0], [0.1], [0.2], [10.0]])
    # second center sits where nothing is assigned to it
    res = _lloyd(X, np.array([[5.0], [100.0]]), max_iters=10, tol=0.0)
    assert res.repaired
    assert res.objective == pytest.approx(best_partition_objective(X, 2))


def test_more_restarts_never_worse():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((25, 2))
    objs = [kmeans_fit(X, KMeansConfig(K=4, n_restarts=r, seed=11)).objective for r in (1, 3, 10, 30)]
    assert all(b <= a for a, b in zip(objs, objs[1:]))


def test_permutation_of_rows_keeps_best_objective():
    rng = np.random.default_rng(12)
    X = rng.standard_normal((7, 2))
    a = kmeans_fit(X, KMeansConfig(K=3, n_restarts=50, seed=1)).objective
    b = kmeans_fit(X[rng.permutation(7)], KMeansConfig(K=3, n_restarts=50, seed=2)).objective
    assert a == pytest.approx(b, abs=1e-9)


# -- prototypes ----------------------------------------------------------------

def _bag(features, bag_id="b0"):
    return MultiScaleBag(bag_id, 0, features)


def test_identical_instances_give_identical_prototypes():
    x = np.array([0.5, -1.0, 2.0])
    bag = _bag({"s20": np.tile(x, (10, 1)), "s10": np.random.default_rng(0).standard_normal((6, 3)),
                "s5": np.random.default_rng(1).standard_normal((4, 3))})
    pb = extract_prototypes(bag, KMeansConfig(K=4))
    np.testing.assert_array_equal(pb.centers["s20"], np.tile(x.astype(np.float32), (4, 1)))


def test_shapes_determinism_and_ordering():
    ds = generate_synthetic(SyntheticConfig(n_bags=2, d=8, bag_size_range=(300, 300), seed=1))
    cfg = KMeansConfig(K=16, n_restarts=2)
    a = extract_prototypes(ds.bags[0], cfg)
    b = extract_prototypes(ds.bags[0], cfg)
    assert a == b
    for s in ds.scales:
        assert a.centers[s].shape == (16, 8)
        first = a.centers[s][:, 0]
        assert np.all(first[:-1] <= first[1:])
        assert a.assignments[s].min() >= 0 and a.assignments[s].max() < 16


def test_small_scale_padded_with_warning():
    ds = generate_synthetic(SyntheticConfig(n_bags=1, d=4, bag_size_range=(32, 32), seed=0))
    with pytest.warns(UserWarning, match="padded"):
        pb = extract_prototypes(ds.bags[0], KMeansConfig(K=8, n_restarts=1))
    assert pb.centers["s5"].shape == (8, 4)  # s5 holds only 2 instances
    assert len(pb.assignments["s5"]) == 2
    assert any("s5" in w for w in pb.warnings)


def test_cache_round_trip_and_stale_rejection(tmp_path):
    ds = generate_synthetic(SyntheticConfig(n_bags=4, d=5, bag_size_range=(40, 60), seed=2))
    cfg = KMeansConfig(K=4, n_restarts=2)
    protos = cache_prototypes(ds, cfg, tmp_path / "p")
    assert (tmp_path / "p" / "protos.manifest.json").exists()
    assert load_prototypes(tmp_path / "p", cfg) == protos
    with pytest.raises(StaleCacheError):
        load_prototypes(tmp_path / "p", KMeansConfig(K=8, n_restarts=2))


def test_cache_of_empty_dataset(tmp_path):
    ds = Dataset(bags=[], d=3)
    cfg = KMeansConfig(K=2)
    cache_prototypes(ds, cfg, tmp_path / "p")
    assert load_prototypes(tmp_path / "p", cfg) == {}


def test_extract_all_is_keyed_by_bag():
    ds = generate_synthetic(SyntheticConfig(n_bags=3, d=2, bag_size_range=(10, 10), seed=0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        protos = extract_all(ds, KMeansConfig(K=2, n_restarts=1))
    assert list(protos) == [b.bag_id for b in ds]

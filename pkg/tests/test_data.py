import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mspt.data import (
    ConfigError,
    Dataset,
    FormatVersionError,
    ManifestError,
    SizeMismatchError,
    SyntheticConfig,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_holdout,
    split_kfold,
    validate_manifest,
)


@pytest.fixture(scope="module")
def small_ds():
    return generate_synthetic(SyntheticConfig(n_bags=12, d=6, bag_size_range=(20, 40), witness_rate=0.1, mu=2.0, seed=3))


def test_fixed_bag_size_pyramid_counts():
    ds = generate_synthetic(SyntheticConfig(n_bags=10, d=4, bag_size_range=(64, 64), scale_ratio=4, seed=1))
    for bag in ds:
        assert (bag.n("s20"), bag.n("s10"), bag.n("s5")) == (64, 16, 4)


def test_same_seed_identical_and_different_seed_differs(small_ds):
    again = generate_synthetic(SyntheticConfig(n_bags=12, d=6, bag_size_range=(20, 40), witness_rate=0.1, mu=2.0, seed=3))
    assert again.bags == small_ds.bags
    other = generate_synthetic(SyntheticConfig(n_bags=12, d=6, bag_size_range=(20, 40), witness_rate=0.1, mu=2.0, seed=4))
    assert other.bags != small_ds.bags


def test_witness_counts_per_scale(small_ds):
    cfg = SyntheticConfig(**small_ds.provenance["config"])
    for bag in small_ds:
        for s in small_ds.scales:
            w = len(bag.witnesses[s])
            if bag.label == 1:
                assert w == max(1, round(cfg.witness_rate * bag.n(s)))
            else:
                assert w == 0


def test_labels_follow_class_balance(small_ds):
    assert small_ds.labels().sum() == 6


def test_zero_separation_classes_match_in_distribution():
    ds = generate_synthetic(SyntheticConfig(n_bags=400, d=3, bag_size_range=(16, 16), witness_rate=1.0, mu=0.0, seed=2))
    means = {lab: np.mean([b.features["s20"].mean() for b in ds if b.label == lab]) for lab in (0, 1)}
    assert abs(means[0] - means[1]) < 0.05


def test_witness_shift_visible_along_hidden_direction():
    ds = generate_synthetic(SyntheticConfig(n_bags=40, d=8, bag_size_range=(200, 200), witness_rate=0.2, mu=3.0, seed=9))
    pos = [b for b in ds if b.label == 1]
    gaps = []
    for bag in pos:
        x = bag.features["s20"]
        w = np.zeros(len(x), bool)
        w[bag.witnesses["s20"]] = True
        gaps.append(np.linalg.norm(x[w].mean(0) - x[~w].mean(0)))
    assert np.mean(gaps) == pytest.approx(3.0, abs=0.4)


def test_coarse_instances_keep_marginal_variance():
    ds = generate_synthetic(SyntheticConfig(n_bags=30, d=16, bag_size_range=(256, 256), class_balance=0.0, seed=5))
    for s in ds.scales:
        resid = np.concatenate([b.features[s] - b.features[s].mean(0) for b in ds])
        assert resid.var() == pytest.approx(1.0, rel=0.1)


@pytest.mark.parametrize(
    "change,msg",
    [({"n_bags": 0}, "n_bags"), ({"sigma": 0.0}, "sigma"), ({"witness_rate": 0.0}, "witness_rate"),
     ({"bag_size_range": (5, 2)}, "bag_size_range")],
)
def test_degenerate_config_rejected(change, msg):
    with pytest.raises(ConfigError, match=msg):
        generate_synthetic(SyntheticConfig(**change))


def test_from_dict_missing_seed_names_field():
    with pytest.raises(ConfigError, match="seed"):
        SyntheticConfig.from_dict({"n_bags": 3, "d": 2, "bag_size_range": [4, 4], "witness_rate": 0.5, "mu": 1, "sigma": 1})


# -- container -----------------------------------------------------------------

def test_round_trip_is_lossless(tmp_path, small_ds):
    save_dataset(small_ds, tmp_path / "c")
    back = load_dataset(tmp_path / "c")
    assert back.bags == small_ds.bags
    assert (back.d, back.class_names, back.scales, back.provenance) == (
        small_ds.d, small_ds.class_names, small_ds.scales, small_ds.provenance)
    for a, b in zip(back.bags, small_ds.bags):
        for s in small_ds.scales:
            assert a.features[s].tobytes() == b.features[s].tobytes()


def test_raw_files_are_little_endian_f32(tmp_path, small_ds):
    save_dataset(small_ds, tmp_path / "c")
    bag = small_ds.bags[0]
    raw = np.fromfile(tmp_path / "c" / "bags" / f"{bag.bag_id}.s10.f32", dtype="<f4")
    np.testing.assert_array_equal(raw.reshape(bag.features["s10"].shape), bag.features["s10"])


def test_empty_dataset_round_trip(tmp_path):
    ds = Dataset(bags=[], d=5)
    save_dataset(ds, tmp_path / "e")
    back = load_dataset(tmp_path / "e")
    assert back.N == 0 and back.d == 5


def test_size_mismatch_names_bag_and_scale(tmp_path, small_ds):
    root = save_dataset(small_ds, tmp_path / "c")
    bag = small_ds.bags[2]
    f = root / "bags" / f"{bag.bag_id}.s10.f32"
    data = np.fromfile(f, dtype="<f4")
    data[: -small_ds.d].tofile(f)  # one row short
    with pytest.raises(SizeMismatchError, match=rf"{bag.bag_id} scale s10"):
        load_dataset(root)


def test_unknown_version_and_malformed_manifest(tmp_path, small_ds):
    root = save_dataset(small_ds, tmp_path / "c")
    m = json.loads((root / "manifest.json").read_text())
    m["version"] = 99
    (root / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(FormatVersionError):
        load_dataset(root)
    (root / "manifest.json").write_text("{not json")
    with pytest.raises(ManifestError):
        load_dataset(root)


def test_validate_clean_container(tmp_path, small_ds):
    root = save_dataset(small_ds, tmp_path / "c")
    assert validate_manifest(root).findings == []


def test_validate_missing_scale_file(tmp_path, small_ds):
    root = save_dataset(small_ds, tmp_path / "c")
    bag = small_ds.bags[1]
    (root / "bags" / f"{bag.bag_id}.s5.f32").unlink()
    findings = validate_manifest(root).findings
    assert len(findings) == 1 and bag.bag_id in findings[0] and "s5" in findings[0]


def test_validate_inconsistent_d(tmp_path, small_ds):
    root = save_dataset(small_ds, tmp_path / "c")
    m = json.loads((root / "manifest.json").read_text())
    odd = m["bags"][3]
    for s, spec in odd["scales"].items():
        spec["cols"] = small_ds.d * 2
        spec["rows"] = spec["rows"] // 2 if spec["rows"] % 2 == 0 else spec["rows"]
    (root / "manifest.json").write_text(json.dumps(m))
    findings = validate_manifest(root).findings
    assert any("feature dimension" in f and odd["id"] in f for f in findings)


# -- folds ---------------------------------------------------------------------

def _balanced(n):
    return generate_synthetic(SyntheticConfig(n_bags=n, d=2, bag_size_range=(4, 4), seed=0))


def test_kfold_ten_bags_five_folds():
    ds = _balanced(10)
    plan = split_kfold(ds, 5, seed=1)
    labels = {b.bag_id: b.label for b in ds}
    for test in plan.test_ids:
        assert sorted(labels[i] for i in test) == [0, 1]


def test_kfold_seeded_and_partitioning():
    ds = _balanced(23)
    a, b = split_kfold(ds, 4, seed=5), split_kfold(ds, 4, seed=5)
    assert a == b
    all_test = [i for t in a.test_ids for i in t]
    assert sorted(all_test) == sorted(x.bag_id for x in ds)
    for train, test in a.splits():
        assert not set(train) & set(test)
        assert len(train) + len(test) == ds.N


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 40), st.integers(2, 6), st.integers(0, 1000))
def test_kfold_per_class_sizes_differ_by_at_most_one(n, k, seed):
    ds = generate_synthetic(SyntheticConfig(n_bags=n, d=1, bag_size_range=(1, 1), class_balance=0.3, seed=seed))
    if k > n:
        with pytest.raises(ConfigError):
            split_kfold(ds, k, seed)
        return
    plan = split_kfold(ds, k, seed)
    labels = {b.bag_id: b.label for b in ds}
    for lab in (0, 1):
        sizes = [sum(labels[i] == lab for i in t) for t in plan.test_ids]
        assert max(sizes) - min(sizes) <= 1


def test_kfold_rejects_bad_k():
    ds = _balanced(4)
    with pytest.raises(ConfigError):
        split_kfold(ds, 5, 0)
    with pytest.raises(ConfigError):
        split_kfold(ds, 1, 0)


def test_holdout_is_stratified():
    ds = _balanced(300)
    plan = split_holdout(ds, 200, seed=7)
    labels = {b.bag_id: b.label for b in ds}
    assert len(plan.train_ids[0]) == 200 and len(plan.test_ids[0]) == 100
    assert sum(labels[i] for i in plan.test_ids[0]) == 50

import itertools

import numpy as np
import pytest

from fzsl.data import (
    ClientPartition,
    Dataset,
    SyntheticSpec,
    ks_statistic,
    label_counts,
    load_dataset,
    make_synthetic,
    partition_even,
    partition_skew,
    partition_uneven,
    save_dataset,
)
from fzsl.errors import InvalidArgument, LoadError
from fzsl.rng import RngStream


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def toy_files(tmp_path):
    attrs = write(tmp_path / "attrs.txt", "fzsl.attrs v1 c=3 m=2\ncat,1,0\ndog,0,1\nfox,0.5,0.5\n")
    split = write(tmp_path / "split.txt", "fzsl.split v1\nseen:0,1\nunseen:2\n")
    return tmp_path, attrs, split


# ---------------------------------------------------------------- loading

def test_train_view_rejects_unseen_label(toy_files):
    tmp, attrs, split = toy_files
    feats = write(tmp / "f.txt", "fzsl.features v1 n=3 d=2\n0,1,2\n1,3,4\n2,5,6\n")
    with pytest.raises(LoadError) as exc:
        load_dataset(feats, attrs, split, view="train")
    assert exc.value.line == 4
    assert load_dataset(feats, attrs, split).features.shape == (3, 2)


def test_declared_shapes_are_echoed(tmp_path):
    rng = np.random.default_rng(0)
    names = [f"c{i}" for i in range(5)]
    labels = np.arange(20) % 5
    from fzsl.data import write_attributes, write_features, write_split
    write_features(tmp_path / "f.txt", rng.normal(size=(20, 7)), labels)
    write_attributes(tmp_path / "a.txt", names, rng.uniform(size=(5, 4)))
    write_split(tmp_path / "s.txt", (0, 1, 2), (3, 4))
    ds = load_dataset(tmp_path / "f.txt", tmp_path / "a.txt", tmp_path / "s.txt")
    assert (ds.num_classes, ds.attribute_dim, ds.features.shape[0]) == (5, 4, 20)


@pytest.mark.parametrize("body,line", [
    ("fzsl.features v1 n=2 d=2\n0,1,2\n", 3),  # ends early
    ("fzsl.features v1 n=1 d=2\n0,1,2\n1,3,4\n", 3),  # trailing rows
    ("fzsl.features v1 n=1 d=2\n0,1\n", 2),  # short row
    ("fzsl.features v1 n=1 d=2\n0,1,x\n", 2),  # not a number
    ("fzsl.features v1 n=1 d=2\n0,1,nan\n", 2),  # non-finite
    ("fzsl.features v2 n=1 d=2\n0,1,2\n", 1),  # bad header
    ("fzsl.features v1 n=1 d=2\n7,1,2\n", 2),  # label out of range
])
def test_malformed_features_report_line(toy_files, body, line):
    tmp, attrs, split = toy_files
    feats = write(tmp / "f.txt", body)
    with pytest.raises(LoadError) as exc:
        load_dataset(feats, attrs, split)
    assert exc.value.line == line
    assert f"f.txt:{line}:" in str(exc.value)


def test_duplicate_attribute_name_rejected(toy_files):
    tmp, _, split = toy_files
    attrs = write(tmp / "a2.txt", "fzsl.attrs v1 c=2 m=1\ncat,1\ncat,2\n")
    feats = write(tmp / "f.txt", "fzsl.features v1 n=1 d=1\n0,1\n")
    with pytest.raises(LoadError):
        load_dataset(feats, attrs, write(tmp / "s2.txt", "fzsl.split v1\nseen:0\nunseen:1\n"))


def test_split_overlap_rejected(toy_files):
    tmp, attrs, _ = toy_files
    split = write(tmp / "s.txt", "fzsl.split v1\nseen:0,1\nunseen:1,2\n")
    feats = write(tmp / "f.txt", "fzsl.features v1 n=1 d=2\n0,1,2\n")
    with pytest.raises(LoadError):
        load_dataset(feats, attrs, split)


def test_missing_file_is_load_error(toy_files):
    tmp, attrs, split = toy_files
    with pytest.raises(LoadError):
        load_dataset(tmp / "missing.txt", attrs, split)


def test_round_trip_is_bit_identical(tmp_path, small_dataset):
    paths = tmp_path / "f.txt", tmp_path / "a.txt", tmp_path / "s.txt"
    save_dataset(small_dataset, *paths, digest="abc123")
    back = load_dataset(*paths)
    assert back.features.tobytes() == small_dataset.features.tobytes()
    assert back.attributes.tobytes() == small_dataset.attributes.tobytes()
    assert np.array_equal(back.labels, small_dataset.labels)
    assert (back.seen_classes, back.unseen_classes) == (small_dataset.seen_classes, small_dataset.unseen_classes)


def test_dataset_rejects_overlapping_split():
    with pytest.raises(InvalidArgument):
        Dataset(np.zeros((1, 2)), [0], ["a", "b"], np.zeros((2, 1)), (0, 1), (1,))


# ---------------------------------------------------------------- synthetic

def test_noise_free_rows_equal_projected_attributes():
    spec = SyntheticSpec(seen_count=4, unseen_count=2, attr_dim=3, feature_dim=5, rows_per_class=4, noise_scale=0.0)
    ds, w = make_synthetic(spec, RngStream(3), return_projection=True)
    for c in range(6):
        rows = ds.features[ds.labels == c]
        assert np.all(rows == rows[0])
        assert np.allclose(rows[0], w @ ds.attributes[c].astype(np.float64), rtol=1e-6)


def test_distinct_classes_have_distinct_means(small_dataset):
    means = np.stack([small_dataset.features[small_dataset.labels == c].mean(0) for c in range(25)])
    gaps = [np.linalg.norm(means[i] - means[j]) for i, j in itertools.combinations(range(25), 2)]
    assert min(gaps) > 0


def test_ridge_recovers_projection():
    spec = SyntheticSpec(noise_scale=0.01, rows_per_class=50)
    ds, w = make_synthetic(spec, RngStream(5), return_projection=True)
    a = ds.attributes.astype(np.float64)
    means = np.stack([ds.features[ds.labels == c].astype(np.float64).mean(0) for c in range(ds.num_classes)])
    w_hat = np.linalg.solve(a.T @ a + 1e-6 * np.eye(a.shape[1]), a.T @ means).T
    assert np.linalg.norm(w_hat - w) / np.linalg.norm(w) < 0.05


def test_synthetic_is_reproducible():
    a = make_synthetic(SyntheticSpec(), RngStream(9))
    b = make_synthetic(SyntheticSpec(), RngStream(9))
    assert a.features.tobytes() == b.features.tobytes() and a.unseen_classes == b.unseen_classes


def test_synthetic_rejects_bad_spec():
    with pytest.raises(InvalidArgument):
        make_synthetic(SyntheticSpec(unseen_count=0), RngStream(0))


# ---------------------------------------------------------------- partitions

def seen_only(n_seen, rows=2):
    labels = np.repeat(np.arange(n_seen + 1), rows)
    return Dataset(
        np.zeros((labels.size, 2)), labels, [f"c{i}" for i in range(n_seen + 1)],
        np.zeros((n_seen + 1, 1)), tuple(range(n_seen)), (n_seen,),
    )


def check_partition(parts, ds):
    subsets = [set(p.class_subset) for p in parts]
    for a, b in itertools.combinations(subsets, 2):
        assert not a & b
    assert set().union(*subsets) == set(ds.seen_classes)
    for p in parts:
        assert set(ds.labels[p.row_indices].tolist()) <= set(p.class_subset)
        assert len(p.row_indices) == len(ds.rows_of(p.class_subset))


def test_even_forty_classes_four_clients():
    ds = seen_only(40)
    parts = partition_even(ds, 4, RngStream(0))
    check_partition(parts, ds)
    assert [len(p.class_subset) for p in parts] == [10] * 4


def test_even_single_client():
    ds = seen_only(7)
    (p,) = partition_even(ds, 1, RngStream(0))
    assert p.class_subset == ds.seen_classes


def test_even_ten_classes_four_clients():
    sizes = [len(p.class_subset) for p in partition_even(seen_only(10), 4, RngStream(2))]
    assert sorted(sizes) == [2, 2, 3, 3]


def test_uneven_floor_and_single_client():
    ds = seen_only(40)
    for seed in range(20):
        parts = partition_uneven(ds, 4, RngStream(seed))
        check_partition(parts, ds)
        assert min(len(p.class_subset) for p in parts) >= 5
    (p,) = partition_uneven(ds, 1, RngStream(0))
    assert p.class_subset == ds.seen_classes


def test_uneven_monte_carlo_floor():
    ds = seen_only(16, rows=1)
    for seed in range(1000):
        parts = partition_uneven(ds, 2, RngStream(seed, ("mc",)))
        assert min(len(p.class_subset) for p in parts) >= 2


def test_uneven_sizes_vary():
    ds = seen_only(40)
    shapes = {tuple(len(p.class_subset) for p in partition_uneven(ds, 4, RngStream(s))) for s in range(50)}
    assert len(shapes) > 10


def test_uneven_infeasible_rejected():
    with pytest.raises(InvalidArgument):
        partition_uneven(seen_only(40), 10, RngStream(0))


def test_partition_rejects_too_many_clients():
    with pytest.raises(InvalidArgument):
        partition_even(seen_only(3), 4, RngStream(0))


# ---------------------------------------------------------------- label skew

def test_ks_examples():
    assert ks_statistic([5, 0, 0], [0, 3, 2]) == 1.0
    assert ks_statistic([2, 4, 6], [1, 2, 3]) == 0.0
    assert ks_statistic([1, 0], [1, 1]) == 0.5


def test_skew_of_disjoint_partition_is_one():
    ds = seen_only(40)
    assert partition_skew(partition_even(ds, 4, RngStream(1)), ds) == 1.0


def test_skew_of_duplicated_clients_is_zero():
    ds = seen_only(10)
    p = ClientPartition(0, ds.seen_classes, ds.rows_of(ds.seen_classes))
    assert partition_skew([p, ClientPartition(1, p.class_subset, p.row_indices)], ds) == 0.0


def test_skew_symmetric_and_relabel_invariant():
    rng = np.random.default_rng(0)
    ds = seen_only(8, rows=10)
    parts = []
    for cid in range(3):
        rows = np.sort(rng.choice(len(ds.labels) - 10, size=25, replace=False))
        parts.append(ClientPartition(cid, tuple(sorted(set(ds.labels[rows].tolist()))), rows))
    base = partition_skew(parts, ds)
    assert partition_skew(parts[::-1], ds) == base
    perm = rng.permutation(8)
    counts = [label_counts(p, ds) for p in parts]
    for a, b in itertools.combinations(counts, 2):
        assert ks_statistic(a[perm], b[perm]) == ks_statistic(a, b)
    assert 0.0 <= base <= 1.0


def test_skew_needs_two_clients():
    ds = seen_only(4)
    with pytest.raises(InvalidArgument):
        partition_skew(partition_even(ds, 1, RngStream(0)), ds)

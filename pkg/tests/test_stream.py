import hashlib
import itertools

import numpy as np
import pytest

from promptfusion.stream import (Dataset, ManifestError, StreamMode, load_manifest,
                                 make_class_incremental_stream, make_domain_blobs,
                                 make_domain_incremental_stream, make_split_blobs, write_manifest)


def toy(n_classes, per_class=5, seed=0):
    return make_split_blobs(n_classes=n_classes, per_class=per_class, image_size=8, seed=seed)


def test_hundred_classes_ten_tasks():
    st = make_class_incremental_stream(toy(100, per_class=2), 10)
    assert st.n_tasks == 10
    assert all(len(t.class_ids) == 10 for t in st)


def test_single_task_holds_every_class():
    st = make_class_incremental_stream(toy(10), 1)
    assert st.n_tasks == 1 and st[0].class_ids == frozenset(range(10))


def test_twelve_classes_four_tasks_disjoint():
    st = make_class_incremental_stream(toy(12), 4)
    assert [sorted(t.class_ids) for t in st] == [[0, 1, 2], [3, 4, 5], [6, 7, 8], [9, 10, 11]]
    for a, b in itertools.combinations(st, 2):
        assert not a.class_ids & b.class_ids


def test_indivisible_and_duplicate_orders_rejected():
    with pytest.raises(ValueError, match="evenly"):
        make_class_incremental_stream(toy(10), 3)
    with pytest.raises(ValueError, match="duplicate"):
        make_class_incremental_stream(toy(4), 2, class_order=[0, 1, 1, 2])


def test_class_order_is_respected():
    st = make_class_incremental_stream(toy(4), 2, class_order=[3, 1, 0, 2])
    assert sorted(st[0].class_ids) == [1, 3]
    assert set(np.unique(st[0].train.labels)) == {1, 3}


def test_stream_is_deterministic_and_partitions_train_items():
    ds = toy(6, per_class=10)
    a = make_class_incremental_stream(ds, 3, seed=4)
    b = make_class_incremental_stream(ds, 3, seed=4)
    assert a.digest() == b.digest()
    idx = np.concatenate(a.train_index)
    assert idx.size == np.unique(idx).size
    test_total = sum(len(t.test) for t in a)
    assert idx.size + test_total == len(ds)
    assert make_class_incremental_stream(ds, 3, seed=5).digest() != a.digest()


def test_domain_stream_three_rotations():
    ds = make_domain_blobs(n_classes=3, per_class=6, angles=(0, 30, 60), seed=1)
    st = make_domain_incremental_stream(ds, [0, 1], [2])
    assert st.mode is StreamMode.DOMAIN_INCREMENTAL and st.n_tasks == 2
    assert st[0].test is st[1].test
    assert st[0].class_ids == st[1].class_ids
    assert not st[0].domain_ids & st[1].domain_ids
    digest = lambda im: hashlib.sha256(im.tobytes()).hexdigest()
    test_hashes = {digest(im) for im in st[0].test.images}
    for task in st:
        assert not test_hashes & {digest(im) for im in task.train.images}


def test_domain_stream_single_train_domain_and_errors():
    ds = make_domain_blobs(n_classes=2, per_class=3, angles=(0, 45), seed=0)
    assert make_domain_incremental_stream(ds, [0], [1]).n_tasks == 1
    with pytest.raises(ValueError, match="overlap"):
        make_domain_incremental_stream(ds, [0, 1], [1])
    keep = ~((ds.domains == 0) & (ds.labels == 1))
    gap = ds.subset(np.flatnonzero(keep))
    with pytest.raises(ValueError, match="missing"):
        make_domain_incremental_stream(gap, [0], [1])


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 4, 4, 3), np.float32), np.array([0, 2]), 2)
    with pytest.raises(ValueError):
        Dataset(np.full((1, 4, 4, 3), 1.5, np.float32), np.array([0]), 1)


def test_manifest_round_trip(tmp_path):
    ds = make_domain_blobs(n_classes=2, per_class=1, angles=(0, 30), seed=0)
    path = write_manifest(ds, tmp_path)
    back = load_manifest(path)
    assert back.n_classes == 2 and len(back) == 4
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.domains, ds.domains)
    np.testing.assert_allclose(back.images, ds.images, atol=1 / 255)


def test_manifest_without_domain_column(tmp_path):
    ds = toy(2, per_class=2)
    back = load_manifest(write_manifest(ds, tmp_path))
    assert back.domains is None and len(back) == 4


def test_manifest_errors_name_the_row(tmp_path):
    (tmp_path / "empty.csv").write_text("path,label\n")
    with pytest.raises(ManifestError, match="empty"):
        load_manifest(tmp_path / "empty.csv")
    path = write_manifest(toy(2, per_class=1), tmp_path)
    text = path.read_text().splitlines()
    path.write_text("\n".join(text + ["missing.png,0"]) + "\n")
    with pytest.raises(ManifestError, match="row 3"):
        load_manifest(path)
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "nope.csv")

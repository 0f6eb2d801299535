import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microt import data


def test_synthetic_images_balanced_and_bounded():
    x, y = data.synthetic_images(data.LOCAL_CLASSES, 60, seed=0)
    assert x.shape == (60, 1, 16, 16) and x.min() >= 0 and x.max() <= 1
    assert np.bincount(y).tolist() == [10] * 6
    x2, y2 = data.synthetic_images(data.LOCAL_CLASSES, 60, seed=0)
    assert np.array_equal(x, x2) and np.array_equal(y, y2)


def test_cloud_and_local_label_sets_differ():
    assert not set(data.CLOUD_CLASSES) & set(data.LOCAL_CLASSES)


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 500), st.integers(0, 2**31))
def test_split_disjoint_and_covering(n, seed):
    tr, te, va = data.split_indices(n, seed)
    allidx = np.concatenate([tr, te, va])
    assert len(allidx) == n and len(np.unique(allidx)) == n


def test_idx_round_trip_and_ingest(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(10, 6, 6), dtype=np.uint8)
    labels = np.arange(10, dtype=np.uint8) % 3
    data.write_idx(tmp_path / "train-images-idx3-ubyte", imgs)
    data.write_idx(tmp_path / "train-labels-idx1-ubyte", labels)
    assert np.array_equal(data.read_idx(tmp_path / "train-images-idx3-ubyte"), imgs)
    h = data.ingest(tmp_path / "train-images-idx3-ubyte", "idx", seed=1)
    assert len(h) == 10 and (len(h.train), len(h.test), len(h.val)) == (8, 1, 1)
    assert h.x.shape == (10, 1, 6, 6) and h.x.min() >= 0 and h.x.max() <= 1
    again = data.ingest(tmp_path / "train-images-idx3-ubyte", "idx", seed=1)
    assert np.array_equal(again.train, h.train)
    resized = data.ingest(tmp_path / "train-images-idx3-ubyte", "idx", seed=1, resize_to=(12, 12))
    assert resized.x.shape == (10, 1, 12, 12) and "resize" in resized.preprocessing


def test_idx_gzip(tmp_path):
    arr = np.arange(12, dtype=np.uint8).reshape(3, 4)
    data.write_idx(tmp_path / "a.idx", arr)
    (tmp_path / "a.idx.gz").write_bytes(gzip.compress((tmp_path / "a.idx").read_bytes()))
    assert np.array_equal(data.read_idx(tmp_path / "a.idx.gz"), arr)


def test_idx_errors(tmp_path):
    (tmp_path / "bad").write_bytes(b"\x01\x02\x08\x01\x00\x00\x00\x01\x00")
    with pytest.raises(data.DatasetFormatError):
        data.read_idx(tmp_path / "bad")
    data.write_idx(tmp_path / "imgs", np.zeros((4, 2, 2), np.uint8))
    data.write_idx(tmp_path / "labs", np.zeros(3, np.uint8))
    with pytest.raises(data.DatasetFormatError):
        data.ingest(tmp_path / "imgs", "idx", 0, labels_path=tmp_path / "labs")
    raw = (tmp_path / "imgs").read_bytes()
    (tmp_path / "short").write_bytes(raw[:-1])
    with pytest.raises(data.DatasetFormatError):
        data.read_idx(tmp_path / "short")


def test_csv_ingest(tmp_path):
    (tmp_path / "t.csv").write_text("a,b,c,label\n1,2,3,0\n4,5,6,1\n7,8,9,0\n0,0,0,1\n")
    h = data.ingest(tmp_path / "t.csv", "csv", 0)
    assert h.x.shape == (4, 3) and h.y.tolist() == [0, 1, 0, 1]
    assert h.x.min() == 0 and h.x.max() == 1
    (tmp_path / "bad.csv").write_text("a,label\nx,1\n")
    with pytest.raises(data.DatasetFormatError):
        data.ingest(tmp_path / "bad.csv", "csv", 0)


def test_crop_resize_identity_and_flip():
    x = np.random.default_rng(0).uniform(size=(2, 1, 5, 5))
    assert np.allclose(data.resize(x, (5, 5)), x)
    aug = data.Augmentation(crop=(1.0, 1.0), flip_prob=1.0, noise_sigma=0.0)
    assert np.allclose(aug(x, np.random.default_rng(0)), x[..., ::-1])


def test_two_blobs_labels():
    x, y = data.two_blobs(20, 0)
    assert x.shape == (20, 1, 12, 12) and set(y.tolist()) == {0, 1}

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import rotate_nearest
from svdreplay.tasks import (
    CLASS_PAIRS,
    Dataset,
    IdxFormatError,
    build_class_split_tasks,
    build_rotation_tasks,
    load_idx,
    rotate_dataset,
    save_idx,
    split_indices,
    synthetic_dataset,
)


def tiny_images(n=6, side=5, seed=0, labels=None):
    rng = np.random.default_rng(seed)
    if labels is None:
        labels = np.arange(n) % 10
    return Dataset(rng.random((n, side * side)), labels, side, side)


class TestIdx:
    def test_round_trip(self, tmp_path):
        ds = tiny_images()
        ds = ds.replace(images=np.rint(ds.images * 255) / 255)
        save_idx(ds, tmp_path / "img", tmp_path / "lab")
        back = load_idx(tmp_path / "img", tmp_path / "lab", num_classes=10)
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert (back.height, back.width) == (5, 5)

    def test_bad_magic(self, tmp_path):
        ds = tiny_images()
        save_idx(ds, tmp_path / "img", tmp_path / "lab")
        with pytest.raises(IdxFormatError, match="offset 0"):
            load_idx(tmp_path / "lab", tmp_path / "img")

    def test_truncated_payload(self, tmp_path):
        save_idx(tiny_images(), tmp_path / "img", tmp_path / "lab")
        blob = (tmp_path / "img").read_bytes()
        (tmp_path / "img").write_bytes(blob[:-3])
        with pytest.raises(IdxFormatError, match=f"offset {len(blob)}"):
            load_idx(tmp_path / "img", tmp_path / "lab")

    def test_count_mismatch(self, tmp_path):
        save_idx(tiny_images(6), tmp_path / "img", tmp_path / "lab")
        save_idx(tiny_images(4), tmp_path / "img4", tmp_path / "lab4")
        with pytest.raises(IdxFormatError, match="6 images"):
            load_idx(tmp_path / "img", tmp_path / "lab4")

    def test_real_mnist_header(self, data_root):
        path = data_root / "mnist" / "train-images-idx3-ubyte"
        if not path.exists():
            pytest.skip("MNIST not available")
        ds = load_idx(path, data_root / "mnist" / "train-labels-idx1-ubyte")
        assert len(ds) == 60000 and ds.num_pixels == 784
        assert ds.images.min() == 0.0 and ds.images.max() == 1.0


class TestRotation:
    @pytest.mark.parametrize("degrees", [0, 90, 180, 270])
    def test_right_angles_match_nearest_oracle(self, degrees):
        ds = tiny_images(4, side=7)
        out = rotate_dataset(ds, degrees).images.reshape(4, 7, 7)
        for img, got in zip(ds.images.reshape(4, 7, 7), out):
            np.testing.assert_array_equal(got, rotate_nearest(img, degrees))

    def test_clockwise(self):
        img = np.zeros((3, 3))
        img[0, 1] = 1.0  # top centre moves to the right edge
        ds = Dataset(img.reshape(1, 9), [0], 3, 3)
        out = rotate_dataset(ds, 90).images.reshape(3, 3)
        assert out[1, 2] == 1.0 and out.sum() == 1.0

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 360))
    def test_range_and_constant_centre(self, degrees):
        ds = tiny_images(3, side=9)
        out = rotate_dataset(ds, degrees).images
        assert out.min() >= 0.0 and out.max() <= 1.0 + 1e-12
        np.testing.assert_allclose(out[:, 40], ds.images[:, 40], atol=1e-12)

    def test_linear_in_images(self):
        a, b = tiny_images(2, seed=1), tiny_images(2, seed=2)
        ab = a.replace(images=a.images + 2 * b.images)
        np.testing.assert_allclose(
            rotate_dataset(ab, 33).images,
            rotate_dataset(a, 33).images + 2 * rotate_dataset(b, 33).images,
            atol=1e-12,
        )

    def test_rgb(self):
        rng = np.random.default_rng(0)
        ds = Dataset(rng.random((2, 4 * 4 * 3)), [0, 1], 4, 4, channels=3)
        out = rotate_dataset(ds, 90).images.reshape(2, 4, 4, 3)
        np.testing.assert_array_equal(out, np.rot90(ds.images.reshape(2, 4, 4, 3), -1, axes=(1, 2)))

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            rotate_dataset(Dataset(np.zeros((1, 6)), [0], 2, 3), 10)


class TestProtocols:
    def test_split_indices_partition(self):
        train, val = split_indices(60, 1 / 6, 0)
        assert len(val) == 10
        np.testing.assert_array_equal(np.sort(np.concatenate([train, val])), np.arange(60))

    def test_rotation_tasks(self):
        ds = tiny_images(30, side=6)
        seq = build_rotation_tasks(ds, val_fraction=0.2)
        assert len(seq) == 10 and seq.num_classes == 10 and seq.protocol == "rotation"
        t0, t9 = seq[0], seq[9]
        assert len(t0.train) == 24 and len(t0.val) == 6
        np.testing.assert_array_equal(t0.train.labels, t9.train.labels)
        expected = np.rot90(t0.val.images.reshape(-1, 6, 6), 2, axes=(1, 2))
        np.testing.assert_allclose(t9.val.images.reshape(-1, 6, 6), expected, atol=1e-12)

    def test_val_is_cached(self):
        seq = build_rotation_tasks(tiny_images(30, side=6), val_fraction=0.2)
        assert seq[3].val is seq[3].val

    def test_class_split_tasks(self):
        ds = tiny_images(200, side=3, labels=np.arange(200) % 10)
        seq = build_class_split_tasks(ds)
        assert len(seq) == 10 and seq.num_classes == 2
        seen = set()
        for task, pair in zip(seq, CLASS_PAIRS):
            for part in (task.train, task.val):
                assert set(part.labels) <= {0, 1}
                assert part.num_classes == 2
            seen.update(pair)
        assert seen == set(range(10))
        # task "8 and 1": 8 is even so label 0, 1 is odd so label 1
        t = seq[9].train
        assert set(t.labels) == {0, 1}

    def test_class_split_train_val_disjoint(self):
        ds = tiny_images(200, side=3, labels=np.arange(200) % 10)
        ds = ds.replace(images=np.arange(200, dtype=float)[:, None].repeat(9, 1) / 200)
        seq = build_class_split_tasks(ds)
        for task in seq:
            assert not set(task.train.images[:, 0]) & set(task.val.images[:, 0])

    def test_class_split_missing_class(self):
        ds = tiny_images(20, side=3, labels=np.arange(20) % 9)
        with pytest.raises(ValueError, match=r"\[9\]"):
            build_class_split_tasks(ds)


class TestSynthetic:
    def test_balanced_and_deterministic(self):
        ds = synthetic_dataset(0, 103, 16, 10)
        counts = np.bincount(ds.labels, minlength=10)
        assert counts.max() - counts.min() <= 1
        assert (ds.height, ds.width) == (4, 4)
        np.testing.assert_array_equal(ds.images, synthetic_dataset(0, 103, 16, 10).images)
        assert 0.0 <= ds.images.min() and ds.images.max() <= 1.0

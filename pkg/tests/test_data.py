import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uap.data import (
    batch_at,
    bound_sample,
    head_batch,
    load_dataset,
    materialize_batch,
    synthetic_dataset,
)
from uap.errors import DatasetError
from uap.tensors import DEFAULT_NORMALIZATION, denormalize01

from conftest import write_png

_EIGHT_BATCH = []


def _eight_batch_source():
    """Small 8-batch synthetic source, built once (the ridge solve is slow)."""
    if not _EIGHT_BATCH:
        _EIGHT_BATCH.append(synthetic_dataset(3, 32, 8, seed=3, batch_size=4)[0])
    return _EIGHT_BATCH[0]


class TestLoadDataset:
    def test_happy_path(self, tiny_manifest):
        source = load_dataset(tiny_manifest)
        assert source.n == 6
        assert source.image_size == (8, 8)
        assert source.num_classes == 3
        assert [source.labels[p] for p in source.paths] == [0, 1, 2, 0, 1, 2]

    def test_pixels_round_trip_via_png(self, tiny_manifest):
        source = load_dataset(tiny_manifest, batch_size=6)
        batch = materialize_batch(source, 0)
        x01 = denormalize01(batch.data, DEFAULT_NORMALIZATION)
        levels = x01 * 255.0
        # every decoded value must be an exact 8-bit level
        assert np.allclose(levels, np.rint(levels), atol=1e-9)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="manifest not found"):
            load_dataset(tmp_path / "nope.csv")

    def test_bad_header(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("file,class\na.png,0\n")
        with pytest.raises(DatasetError, match="header"):
            load_dataset(path)

    def test_empty_body(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("path,label\n")
        with pytest.raises(DatasetError, match="no images"):
            load_dataset(path)

    def test_wrong_column_count(self, tmp_path, rng):
        write_png(tmp_path / "a.png", rng.integers(0, 255, size=(8, 8, 3)))
        path = tmp_path / "manifest.csv"
        path.write_text("path,label\na.png,0,extra\n")
        with pytest.raises(DatasetError, match="row 2"):
            load_dataset(path)

    def test_non_integer_label(self, tmp_path, rng):
        write_png(tmp_path / "a.png", rng.integers(0, 255, size=(8, 8, 3)))
        path = tmp_path / "manifest.csv"
        path.write_text("path,label\na.png,cat\n")
        with pytest.raises(DatasetError, match="row 2.*not an integer"):
            load_dataset(path)

    def test_negative_label(self, tmp_path, rng):
        write_png(tmp_path / "a.png", rng.integers(0, 255, size=(8, 8, 3)))
        path = tmp_path / "manifest.csv"
        path.write_text("path,label\na.png,-1\n")
        with pytest.raises(DatasetError, match="row 2.*negative"):
            load_dataset(path)

    def test_label_out_of_declared_range(self, tmp_path, rng):
        write_png(tmp_path / "a.png", rng.integers(0, 255, size=(8, 8, 3)))
        path = tmp_path / "manifest.csv"
        path.write_text("path,label\na.png,5\n")
        with pytest.raises(DatasetError, match="row 2.*out of range"):
            load_dataset(path, num_classes=3)

    def test_missing_image_file(self, tmp_path, rng):
        write_png(tmp_path / "a.png", rng.integers(0, 255, size=(8, 8, 3)))
        path = tmp_path / "manifest.csv"
        path.write_text("path,label\na.png,0\nghost.png,1\n")
        with pytest.raises(DatasetError, match="row 3.*missing image"):
            load_dataset(path)

    def test_duplicate_path(self, tmp_path, rng):
        write_png(tmp_path / "a.png", rng.integers(0, 255, size=(8, 8, 3)))
        path = tmp_path / "manifest.csv"
        path.write_text("path,label\na.png,0\na.png,1\n")
        with pytest.raises(DatasetError, match="row 3.*duplicate"):
            load_dataset(path)

    def test_undecodable_image(self, tmp_path):
        (tmp_path / "junk.png").write_bytes(b"this is not a png")
        path = tmp_path / "manifest.csv"
        path.write_text("path,label\njunk.png,0\n")
        with pytest.raises(DatasetError, match="row 2.*cannot decode"):
            load_dataset(path)

    def test_size_mismatch_names_row(self, tmp_path, rng):
        write_png(tmp_path / "a.png", rng.integers(0, 255, size=(8, 8, 3)))
        write_png(tmp_path / "b.png", rng.integers(0, 255, size=(4, 4, 3)))
        path = tmp_path / "manifest.csv"
        path.write_text("path,label\na.png,0\nb.png,1\n")
        source = load_dataset(path, batch_size=2)
        with pytest.raises(DatasetError, match="row 3"):
            materialize_batch(source, 0)

    def test_invalid_batch_size(self, tiny_manifest):
        with pytest.raises(DatasetError, match="batch_size"):
            load_dataset(tiny_manifest, batch_size=0)

    def test_shuffle_is_seeded_permutation(self, tiny_manifest):
        plain = load_dataset(tiny_manifest)
        a = load_dataset(tiny_manifest, shuffle_seed=99)
        b = load_dataset(tiny_manifest, shuffle_seed=99)
        c = load_dataset(tiny_manifest, shuffle_seed=100)
        assert a.paths == b.paths
        assert sorted(a.paths) == sorted(plain.paths)
        assert a.paths != c.paths or a.paths != plain.paths
        # labels follow their image through the shuffle
        assert all(a.labels[p] == plain.labels[p] for p in a.paths)


class TestBatching:
    def test_partition_with_short_tail(self, tiny_manifest):
        source = load_dataset(tiny_manifest, batch_size=4)
        assert source.num_batches == 2
        first = materialize_batch(source, 0)
        second = materialize_batch(source, 1)
        assert first.n == 4
        assert second.n == 2
        assert first.batch_id == 0
        assert second.batch_id == 1

    def test_batches_cover_everything_once(self, tiny_manifest):
        source = load_dataset(tiny_manifest, batch_size=4)
        seen = np.concatenate(
            [materialize_batch(source, i).labels for i in range(source.num_batches)]
        )
        assert seen.tolist() == [0, 1, 2, 0, 1, 2]

    def test_out_of_range_batch(self, tiny_manifest):
        source = load_dataset(tiny_manifest, batch_size=4)
        with pytest.raises(DatasetError, match="batch index"):
            materialize_batch(source, 2)

    def test_cache_returns_same_object(self, tiny_manifest):
        source = load_dataset(tiny_manifest, batch_size=4)
        assert materialize_batch(source, 0) is materialize_batch(source, 0)

    @given(st.integers(0, 500), st.integers(1, 10))
    def test_batch_at_arithmetic(self, generation, period):
        source = _eight_batch_source()
        batch = batch_at(source, generation, period)
        assert batch.batch_id == (generation // period) % source.num_batches

    def test_batch_at_validation(self, tiny_manifest):
        source = load_dataset(tiny_manifest)
        with pytest.raises(ValueError, match="rotation_period"):
            batch_at(source, 0, 0)
        with pytest.raises(ValueError, match="generation"):
            batch_at(source, -1, 4)


class TestSampling:
    def test_bound_sample_counts(self, tiny_manifest):
        source = load_dataset(tiny_manifest, batch_size=2)
        assert bound_sample(source, 2).n == 4
        # requesting more than exists clamps to the dataset
        assert bound_sample(source, 50).n == 6

    def test_bound_sample_validation(self, tiny_manifest):
        source = load_dataset(tiny_manifest)
        with pytest.raises(ValueError, match="sample_batches"):
            bound_sample(source, 0)

    def test_head_batch(self, tiny_manifest):
        source = load_dataset(tiny_manifest, batch_size=2)
        head = head_batch(source, 3)
        assert head.n == 3
        assert head.labels.tolist() == [0, 1, 2]
        assert head_batch(source, 100).n == 6
        with pytest.raises(ValueError):
            head_batch(source, 0)


class TestSynthetic:
    def test_deterministic(self):
        a_src, a_oracle = synthetic_dataset(3, 32, 8, seed=3)
        b_src, b_oracle = synthetic_dataset(3, 32, 8, seed=3)
        assert np.array_equal(a_src.images01, b_src.images01)
        assert np.array_equal(a_oracle.w1, b_oracle.w1)
        c_src, _ = synthetic_dataset(3, 32, 8, seed=4)
        assert not np.array_equal(a_src.images01, c_src.images01)

    def test_label_shares_dominant_class(self, toy_pair):
        source, _ = toy_pair
        labels = np.array([source.labels[p] for p in source.paths])
        counts = np.bincount(labels, minlength=3)
        assert counts.tolist() == [192, 32, 32]

    def test_oracle_accuracy_threshold(self, toy_pair, toy_batch):
        _, oracle = toy_pair
        assert oracle.accuracy(toy_batch) >= 0.95

    def test_images_in_unit_range(self, toy_pair):
        source, _ = toy_pair
        assert source.images01.min() >= 0.0
        assert source.images01.max() <= 1.0

    def test_source_fields(self, toy_pair):
        source, oracle = toy_pair
        assert source.n == 256
        assert source.image_size == (16, 16)
        assert source.batch_size == 256
        assert source.num_batches == 1
        assert oracle.input_shape == (3, 16, 16)
        assert oracle.num_classes == 3

    def test_too_few_classes(self):
        with pytest.raises(DatasetError, match="num_classes"):
            synthetic_dataset(1, 32, 8, seed=0)

    def test_too_few_images(self):
        with pytest.raises(DatasetError, match="need n >="):
            synthetic_dataset(3, 6, 8, seed=0)

    def test_rectangular_image_size(self):
        source, oracle = synthetic_dataset(3, 16, (4, 6), seed=2, batch_size=16)
        assert source.image_size == (4, 6)
        assert oracle.input_shape == (3, 4, 6)

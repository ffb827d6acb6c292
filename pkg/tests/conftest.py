import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from uap.data import synthetic_dataset
from uap.tensors import DEFAULT_NORMALIZATION, ImageBatch, normalize01

settings.register_profile(
    "ci",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def toy_pair():
    """The reference 3-class synthetic dataset with its fitted linear oracle."""
    return synthetic_dataset(3, 256, 16, seed=7, batch_size=256)


@pytest.fixture(scope="session")
def toy_pair_bs64():
    """Same data as toy_pair but partitioned into four 64-image batches."""
    return synthetic_dataset(3, 256, 16, seed=7, batch_size=64)


@pytest.fixture(scope="session")
def toy_batch(toy_pair):
    source, _ = toy_pair
    return ImageBatch(
        data=normalize01(source.images01, source.normalization),
        labels=np.array([source.labels[p] for p in source.paths], dtype=np.int64),
        batch_id=0,
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def write_png(path, array_hw3):
    """Write an (H, W, 3) uint8 array as a PNG via Pillow."""
    from PIL import Image

    Image.fromarray(np.asarray(array_hw3, dtype=np.uint8)).save(path)


@pytest.fixture()
def tiny_manifest(tmp_path):
    """Six 8x8 deterministic images and their manifest; returns the CSV path."""
    rng = np.random.default_rng(7)
    (tmp_path / "img").mkdir()
    rows = ["path,label"]
    for i in range(6):
        arr = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
        write_png(tmp_path / "img" / f"{i}.png", arr)
        rows.append(f"img/{i}.png,{i % 3}")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text("\n".join(rows) + "\n")
    return manifest

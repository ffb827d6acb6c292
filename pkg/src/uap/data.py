"""Dataset loading, batching, and rotation for fitness evaluation.

Manifests are CSV files with header ``path,label``; image paths are resolved
relative to the manifest's directory. Images must be pre-resized to a common
H x W (resizing is out of scope). Batches partition the manifest in order, the
last batch possibly short, and the batch schedule wraps around cyclically.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError
from .oracle import LinearOracle
from .tensors import DEFAULT_NORMALIZATION, ImageBatch, NormalizationSpec, normalize01

MANIFEST_HEADER = ("path", "label")


@dataclass
class DatasetSource:
    """Validated, deterministically ordered image collection.

    Either manifest-backed (decoded lazily, one materialized batch cached) or
    fully in-memory via ``images01`` (synthetic data).
    """

    root: Path
    paths: list[str]
    labels: dict[str, int]
    normalization: NormalizationSpec
    batch_size: int = 64
    image_size: tuple[int, int] | None = None
    num_classes: int | None = None
    images01: np.ndarray | None = None
    rownums: list[int] | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self) -> int:
        return len(self.paths)

    @property
    def num_batches(self) -> int:
        return math.ceil(self.n / self.batch_size)

    def row_name(self, index: int) -> str:
        row = self.rownums[index] if self.rownums is not None else index + 2
        return f"row {row} ({self.paths[index]})"


def _decode01(source: DatasetSource, index: int) -> np.ndarray:
    """One image as (3, H, W) floats in [0, 1]."""
    if source.images01 is not None:
        return source.images01[index]
    from PIL import Image

    path = source.root / source.paths[index]
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    except FileNotFoundError:
        raise DatasetError(f"{source.row_name(index)}: missing image file {path}") from None
    except Exception as exc:
        raise DatasetError(f"{source.row_name(index)}: cannot decode {path}: {exc}") from exc
    if source.image_size is not None and arr.shape[:2] != source.image_size:
        raise DatasetError(
            f"{source.row_name(index)}: image is {arr.shape[1]}x{arr.shape[0]}, "
            f"expected {source.image_size[1]}x{source.image_size[0]}"
        )
    return arr.transpose(2, 0, 1) / 255.0


def load_dataset(
    manifest: str | Path,
    *,
    batch_size: int = 64,
    normalization: NormalizationSpec = DEFAULT_NORMALIZATION,
    num_classes: int | None = None,
    shuffle_seed: int | None = None,
) -> DatasetSource:
    """Parse and validate a manifest CSV.

    Every referenced file must exist and labels must be in range; violations
    name the offending row. Order is manifest order unless shuffle_seed is
    given (a reproducibility escape hatch, off by default).
    """
    manifest = Path(manifest)
    if not manifest.exists():
        raise DatasetError(f"manifest not found: {manifest}")
    with open(manifest, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(h.strip() for h in rows[0]) != MANIFEST_HEADER:
        raise DatasetError(f"{manifest}: first line must be the header 'path,label'")
    if len(rows) == 1:
        raise DatasetError(f"{manifest}: no images listed")
    if batch_size < 1:
        raise DatasetError(f"batch_size must be >= 1, got {batch_size}")

    root = manifest.parent
    paths: list[str] = []
    labels: dict[str, int] = {}
    rownums: list[int] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise DatasetError(f"{manifest} row {lineno}: expected 'path,label', got {row!r}")
        rel, raw_label = row[0].strip(), row[1].strip()
        try:
            label = int(raw_label)
        except ValueError:
            raise DatasetError(
                f"{manifest} row {lineno}: label {raw_label!r} is not an integer"
            ) from None
        if label < 0:
            raise DatasetError(f"{manifest} row {lineno}: label {label} is negative")
        if num_classes is not None and label >= num_classes:
            raise DatasetError(
                f"{manifest} row {lineno}: label {label} out of range for "
                f"{num_classes} classes"
            )
        if not (root / rel).exists():
            raise DatasetError(f"{manifest} row {lineno}: missing image file {root / rel}")
        if rel in labels:
            raise DatasetError(f"{manifest} row {lineno}: duplicate path {rel}")
        paths.append(rel)
        labels[rel] = label
        rownums.append(lineno)

    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(paths))
        paths = [paths[i] for i in order]
        rownums = [rownums[i] for i in order]

    source = DatasetSource(
        root=root,
        paths=paths,
        labels=labels,
        normalization=normalization,
        batch_size=batch_size,
        num_classes=num_classes if num_classes is not None else max(labels.values()) + 1,
        rownums=rownums,
    )
    first = _decode01(source, 0)  # fixes H x W for the whole set
    source.image_size = (first.shape[1], first.shape[2])
    return source


def materialize_batch(source: DatasetSource, batch_index: int) -> ImageBatch:
    """Decode and normalize one partition; the most recent batch is cached."""
    if not 0 <= batch_index < source.num_batches:
        raise DatasetError(
            f"batch index {batch_index} out of range [0, {source.num_batches})"
        )
    cached = source._cache.get(batch_index)
    if cached is not None:
        return cached
    lo = batch_index * source.batch_size
    hi = min(lo + source.batch_size, source.n)
    images01 = np.stack([_decode01(source, i) for i in range(lo, hi)])
    batch = ImageBatch(
        data=normalize01(images01, source.normalization),
        labels=np.array([source.labels[source.paths[i]] for i in range(lo, hi)], dtype=np.int64),
        batch_id=batch_index,
    )
    source._cache.clear()
    source._cache[batch_index] = batch
    return batch


def batch_at(source: DatasetSource, generation: int, rotation_period: int) -> ImageBatch:
    """Batch for a given generation: index floor(generation / k) mod num_batches."""
    if rotation_period < 1:
        raise ValueError(f"rotation_period must be >= 1, got {rotation_period}")
    if generation < 0:
        raise ValueError(f"generation must be >= 0, got {generation}")
    return materialize_batch(source, (generation // rotation_period) % source.num_batches)


def bound_sample(source: DatasetSource, sample_batches: int) -> ImageBatch:
    """First sample_batches batches stacked into one batch (for bounds).

    Clamped to the whole dataset when the request exceeds it.
    """
    if sample_batches < 1:
        raise ValueError(f"sample_batches must be >= 1, got {sample_batches}")
    hi = min(sample_batches * source.batch_size, source.n)
    images01 = np.stack([_decode01(source, i) for i in range(hi)])
    return ImageBatch(
        data=normalize01(images01, source.normalization),
        labels=np.array([source.labels[source.paths[i]] for i in range(hi)], dtype=np.int64),
        batch_id=0,
    )


def head_batch(source: DatasetSource, n: int) -> ImageBatch:
    """First min(n, len(dataset)) images as a single batch (for evaluation)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    hi = min(n, source.n)
    images01 = np.stack([_decode01(source, i) for i in range(hi)])
    return ImageBatch(
        data=normalize01(images01, source.normalization),
        labels=np.array([source.labels[source.paths[i]] for i in range(hi)], dtype=np.int64),
        batch_id=0,
    )


def _cyclic_labels(n: int, num_classes: int) -> np.ndarray:
    """One dominant class 0; classes 1..K-1 each take one slot per cycle.

    The cycle length is max(8, 2*(K-1)), so for K=3 the shares are
    (0.75, 0.125, 0.125). A single dominant class matters for attackability:
    funnelling it into either rare class is one continuous margin ladder from
    zero misclassification up to 1 - share(rarest), with no fitness valley.
    Balanced classes instead cap any single-direction attack at 1 - 1/K and
    force a coordinated multi-class flip that small populations cannot find.
    """
    cycle = max(8, 2 * (num_classes - 1))
    pattern = [0] * (cycle - (num_classes - 1)) + list(range(1, num_classes))
    return np.array([pattern[i % cycle] for i in range(n)], dtype=np.int64)


def synthetic_dataset(
    num_classes: int,
    n: int,
    image_size: int | tuple[int, int],
    seed: int,
    *,
    mean_spread: float = 0.08,
    noise_scale: float = 0.15,
    ridge: float = 10000.0,
    batch_size: int = 64,
    normalization: NormalizationSpec = DEFAULT_NORMALIZATION,
) -> tuple[DatasetSource, LinearOracle]:
    """Deterministic in-memory blobs dataset plus a matching linear oracle.

    Images are per-class mean patterns (uniform around mid-gray with the given
    spread) plus Gaussian noise, clipped to [0, 1]. The oracle is a
    closed-form ridge least-squares fit of one-hot targets (class-balanced row
    weights) on the normalized images and must reach at least 95% accuracy on
    its own data.

    The geometry is tuned so an evolved perturbation can actually win: class
    separation is only a few noise sigmas, so decision boundaries sit close
    to the clusters and crossing them costs a small fraction of the per-pixel
    std bounds. The ridge term stops the underdetermined fit from
    interpolating its training noise (which would pin every margin at exactly
    1 and leave no fitness gradient); the row weights keep the deliberately
    rare classes from being shrunk into irrelevance. See ``_cyclic_labels``
    for why one class dominates.
    """
    if num_classes < 2:
        raise DatasetError(f"num_classes must be >= 2, got {num_classes}")
    cycle = max(8, 2 * (num_classes - 1))
    if n < cycle:
        raise DatasetError(f"need n >= {cycle} for {num_classes} classes")
    h, w = (image_size, image_size) if isinstance(image_size, int) else image_size
    rng = np.random.default_rng(seed)
    means = 0.5 + mean_spread * (rng.uniform(0.0, 1.0, size=(num_classes, 3, h, w)) - 0.5)
    label_arr = _cyclic_labels(n, num_classes)
    images01 = np.clip(
        means[label_arr] + noise_scale * rng.standard_normal((n, 3, h, w)), 0.0, 1.0
    )

    x = normalize01(images01, normalization).reshape(n, -1)
    design = np.concatenate([x, np.ones((n, 1))], axis=1)
    targets = np.eye(num_classes)[label_arr]
    counts = np.bincount(label_arr, minlength=num_classes)
    row_w = np.sqrt(n / (num_classes * counts))[label_arr][:, None]
    reg = ridge * np.eye(design.shape[1])
    reg[-1, -1] = 0.0  # intercept unregularized
    dw, tw = design * row_w, targets * row_w
    theta = np.linalg.solve(dw.T @ dw + reg, dw.T @ tw)
    oracle = LinearOracle(w1=theta[:-1].T, b1=theta[-1], input_shape=(3, h, w))

    paths = [f"synthetic/{i:06d}" for i in range(n)]
    source = DatasetSource(
        root=Path("."),
        paths=paths,
        labels={p: int(lbl) for p, lbl in zip(paths, label_arr)},
        normalization=normalization,
        batch_size=batch_size,
        image_size=(h, w),
        num_classes=num_classes,
        images01=images01,
    )
    full = ImageBatch(
        data=normalize01(images01, normalization), labels=label_arr, batch_id=0
    )
    acc = oracle.accuracy(full)
    if acc < 0.95:
        raise DatasetError(f"synthetic oracle only reaches accuracy {acc:.3f} (< 0.95)")
    return source, oracle

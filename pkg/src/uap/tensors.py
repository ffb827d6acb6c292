"""Image and perturbation tensor arithmetic.

Conventions used throughout the package:

- Images travel as float arrays in the *normalized* domain,
  ``x_norm[c] = (x01[c] - mean[c]) / std[c]`` with ``x01`` in ``[0, 1]``.
- Perturbations (gene tensors) live in the same normalized domain.
- Visibility metrics (MSE, L2 norm) are reported in the unnormalized
  ``[0, pixel_scale]`` domain so they are comparable across normalization
  choices.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FileFormatError, ShapeError

PERTURBATION_MAGIC = b"UAPP"
PERTURBATION_VERSION = 1


@dataclass(frozen=True)
class NormalizationSpec:
    """Channel-wise affine normalization plus the unnormalized-domain ceiling."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    pixel_scale: float = 255.0

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("mean and std must each have 3 channel entries")
        if any(s <= 0 for s in self.std):
            raise ValueError(f"std components must be strictly positive, got {self.std}")
        if self.pixel_scale <= 0:
            raise ValueError(f"pixel_scale must be positive, got {self.pixel_scale}")

    def mean_chw(self) -> np.ndarray:
        return np.asarray(self.mean, dtype=np.float64).reshape(3, 1, 1)

    def std_chw(self) -> np.ndarray:
        return np.asarray(self.std, dtype=np.float64).reshape(3, 1, 1)


DEFAULT_NORMALIZATION = NormalizationSpec(
    mean=(0.485, 0.456, 0.406),
    std=(0.229, 0.225, 0.226),
)


@dataclass
class ImageBatch:
    """A batch of normalized images with ground-truth labels.

    ``data`` has shape (N, 3, H, W); ``batch_id`` identifies which slice of
    the dataset pool this batch came from.
    """

    data: np.ndarray
    labels: np.ndarray
    batch_id: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.data.ndim != 4:
            raise ShapeError(f"batch data must be rank 4 (N, C, H, W), got shape {self.data.shape}")
        if self.data.shape[0] < 1:
            raise ShapeError("batch must contain at least one image")
        if self.data.shape[1] != 3:
            raise ShapeError(f"batch must have 3 channels, got {self.data.shape[1]}")
        if self.labels.shape != (self.data.shape[0],):
            raise ShapeError(
                f"labels shape {self.labels.shape} does not match batch size {self.data.shape[0]}"
            )
        if np.any(self.labels < 0):
            raise ShapeError("labels must be non-negative class ids")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


@dataclass
class Perturbation:
    """A candidate universal perturbation: one gene per pixel per channel."""

    genes: np.ndarray

    def __post_init__(self):
        self.genes = np.asarray(self.genes, dtype=np.float64)
        if self.genes.ndim != 3:
            raise ShapeError(f"genes must be rank 3 (C, H, W), got shape {self.genes.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.genes.shape

    def copy(self) -> "Perturbation":
        return Perturbation(self.genes.copy())


@dataclass
class PerturbationBounds:
    """Symmetric per-gene interval [-sigma, sigma] in the normalized domain."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if self.lower.shape != self.upper.shape:
            raise ShapeError("lower and upper bounds must share a shape")
        if np.any(self.upper < 0):
            raise ValueError("upper bounds must be non-negative")
        if not np.array_equal(self.lower, -self.upper):
            raise ValueError("bounds must be symmetric about zero (lower == -upper)")

    @classmethod
    def symmetric(cls, sigma: np.ndarray) -> "PerturbationBounds":
        sigma = np.asarray(sigma, dtype=np.float64)
        return cls(lower=-sigma, upper=sigma.copy())

    @property
    def shape(self) -> tuple[int, ...]:
        return self.upper.shape


# ---------------------------------------------------------------------------
# Domain conversions
# ---------------------------------------------------------------------------

def normalize01(x01: np.ndarray, spec: NormalizationSpec) -> np.ndarray:
    """Map [0, 1] images into the normalized domain (last three axes C, H, W)."""
    return (np.asarray(x01, dtype=np.float64) - spec.mean_chw()) / spec.std_chw()


def denormalize01(x_norm: np.ndarray, spec: NormalizationSpec) -> np.ndarray:
    """Inverse of :func:`normalize01`."""
    return np.asarray(x_norm, dtype=np.float64) * spec.std_chw() + spec.mean_chw()


def renormalize_batch(
    batch: ImageBatch, source: NormalizationSpec, target: NormalizationSpec
) -> ImageBatch:
    """Re-express a batch held under one normalization in another one.

    Pure affine rebase; no clamping, so values outside [0, 1] survive the
    round trip unchanged.
    """
    x01 = denormalize01(batch.data, source)
    return ImageBatch(normalize01(x01, target), batch.labels.copy(), batch.batch_id)


# ---------------------------------------------------------------------------
# Bounds
# ---------------------------------------------------------------------------

def compute_bounds(sample: ImageBatch) -> PerturbationBounds:
    """Per-pixel symmetric bounds from the sample's standard deviation.

    Uses the population formula (divide by N). Requires N >= 2 so the
    statistic cannot degenerate to all-zero bounds off a single image.
    """
    if sample.n < 2:
        raise ShapeError(f"bounds estimation needs at least 2 images, got {sample.n}")
    sigma = np.std(sample.data, axis=0, ddof=0)
    return PerturbationBounds.symmetric(sigma)


# ---------------------------------------------------------------------------
# Perturbation application and visibility metrics
# ---------------------------------------------------------------------------

def apply_perturbation(
    batch: ImageBatch, delta: Perturbation, norm: NormalizationSpec
) -> ImageBatch:
    """Superimpose the perturbation on every image in the batch.

    The perturbed images are clamped to the valid pixel range in the
    unnormalized domain, then re-expressed in the normalized domain.
    Labels and batch_id pass through unchanged.
    """
    if delta.shape != batch.image_shape:
        raise ShapeError(
            f"perturbation shape {delta.shape} does not match image shape {batch.image_shape}"
        )
    x01 = denormalize01(batch.data, norm)
    d01 = delta.genes * norm.std_chw()
    perturbed01 = np.clip(x01 + d01, 0.0, 1.0)
    return ImageBatch(normalize01(perturbed01, norm), batch.labels.copy(), batch.batch_id)


def mse_255(clean: ImageBatch, perturbed: ImageBatch, norm: NormalizationSpec) -> float:
    """Mean squared pixel error in the [0, pixel_scale] domain.

    Per image the error is averaged over all channels and pixels; the batch
    value is the mean over images.
    """
    if clean.data.shape != perturbed.data.shape:
        raise ShapeError(
            f"batch shapes differ: {clean.data.shape} vs {perturbed.data.shape}"
        )
    diff = (clean.data - perturbed.data) * norm.std_chw() * norm.pixel_scale
    return float(np.mean(diff * diff))


def l2_norm_255(delta: Perturbation, norm: NormalizationSpec) -> float:
    """Euclidean norm of the perturbation in the [0, pixel_scale] domain."""
    scaled = delta.genes * norm.std_chw() * norm.pixel_scale
    return float(np.sqrt(np.sum(scaled * scaled)))


# ---------------------------------------------------------------------------
# Perturbation file format (little-endian, float32 payload)
# ---------------------------------------------------------------------------

def save_perturbation(delta: Perturbation, path: str | Path) -> None:
    """Write genes as magic, version, and dims followed by float32 data."""
    c, h, w = delta.shape
    header = struct.pack("<4sIIII", PERTURBATION_MAGIC, PERTURBATION_VERSION, c, h, w)
    payload = delta.genes.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(header + payload)


def load_perturbation(path: str | Path) -> Perturbation:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FileFormatError(f"{path}: cannot read perturbation ({exc})") from exc
    if len(raw) < 20:
        raise FileFormatError(f"{path}: truncated header ({len(raw)} bytes, need 20)")
    magic, version, c, h, w = struct.unpack_from("<4sIIII", raw, 0)
    if magic != PERTURBATION_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != PERTURBATION_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    expected = 20 + 4 * c * h * w
    if len(raw) != expected:
        raise FileFormatError(
            f"{path}: payload truncated at byte {len(raw)} (expected {expected} bytes "
            f"for {c}x{h}x{w} float32 genes)"
        )
    genes = np.frombuffer(raw, dtype="<f4", offset=20).reshape(c, h, w)
    return Perturbation(genes.astype(np.float64))

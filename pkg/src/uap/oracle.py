"""Classifier oracles: top-1 predictions and true-label confidences.

Two backends share one prediction surface:

- a deterministic linear (optionally one-hidden-layer) network loaded from a
  small self-describing binary file, used for desk-scale runs and tests
- an ONNX interchange backend for real pretrained models

Softmax is applied here, not expected from model files; backends produce raw
logits.
"""

from __future__ import annotations

import json
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FileFormatError, OnnxError, ShapeError
from .tensors import ImageBatch, NormalizationSpec

WEIGHTS_MAGIC = b"UAPW"
WEIGHTS_VERSION = 1

#: JSON schema for the ONNX preprocessing descriptor. Companion tooling
#: validates emitted descriptors against this document.
DESCRIPTOR_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "OnnxPreprocessingDescriptor",
    "type": "object",
    "required": ["input_name", "output_name", "mean", "std", "input_size"],
    "properties": {
        "input_name": {"type": "string", "minLength": 1},
        "output_name": {"type": "string", "minLength": 1},
        "mean": {
            "type": "array",
            "items": {"type": "number"},
            "minItems": 3,
            "maxItems": 3,
        },
        "std": {
            "type": "array",
            "items": {"type": "number", "exclusiveMinimum": 0},
            "minItems": 3,
            "maxItems": 3,
        },
        "input_size": {
            "type": "array",
            "items": {"type": "integer", "minimum": 1},
            "minItems": 2,
            "maxItems": 2,
        },
    },
    "additionalProperties": True,
}


@dataclass
class Prediction:
    """Top-1 class ids plus the softmax probability of each true label."""

    top1: np.ndarray
    probs_true_label: np.ndarray


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


class ClassifierOracle(ABC):
    """Deterministic top-1 classifier exposed only through its outputs.

    Subclasses provide ``raw_logits``; prediction, tie-breaking, and
    confidence extraction are shared. Oracles are immutable after load and
    safe to call from multiple evaluation workers.
    """

    num_classes: int
    input_shape: tuple[int, int, int]
    micro_batch: int = 64

    @abstractmethod
    def raw_logits(self, x: np.ndarray) -> np.ndarray:
        """Return (N, num_classes) logits for an (N, C, H, W) input array."""

    def predict(self, batch: ImageBatch) -> Prediction:
        """Top-1 ids (argmax ties break toward the lowest class index) and
        softmax probability assigned to each image's ground-truth label."""
        if batch.image_shape != self.input_shape:
            raise ShapeError(
                f"batch image shape {batch.image_shape} does not match oracle "
                f"input shape {self.input_shape}"
            )
        if np.any(batch.labels >= self.num_classes):
            raise ShapeError(
                f"labels must lie in [0, {self.num_classes}), got max {batch.labels.max()}"
            )
        tops = []
        probs = []
        for start in range(0, batch.n, self.micro_batch):
            chunk = batch.data[start : start + self.micro_batch]
            labels = batch.labels[start : start + self.micro_batch]
            p = softmax(self.raw_logits(chunk))
            tops.append(np.argmax(p, axis=1))
            probs.append(p[np.arange(len(labels)), labels])
        return Prediction(
            top1=np.concatenate(tops).astype(np.int64),
            probs_true_label=np.concatenate(probs),
        )

    def accuracy(self, batch: ImageBatch) -> float:
        """Fraction of images whose top-1 prediction matches the label."""
        pred = self.predict(batch)
        return float(np.mean(pred.top1 == batch.labels))


# ---------------------------------------------------------------------------
# Linear / one-hidden-layer backend and its weights file
# ---------------------------------------------------------------------------

class LinearOracle(ClassifierOracle):
    """softmax(W1 x + b1), optionally W2 relu(W1 x + b1) + b2."""

    def __init__(
        self,
        w1: np.ndarray,
        b1: np.ndarray,
        input_shape: tuple[int, int, int],
        w2: np.ndarray | None = None,
        b2: np.ndarray | None = None,
    ):
        c, h, w = input_shape
        dim = c * h * w
        self.w1 = np.asarray(w1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.w2 = None if w2 is None else np.asarray(w2, dtype=np.float64)
        self.b2 = None if b2 is None else np.asarray(b2, dtype=np.float64)
        if self.w1.ndim != 2 or self.w1.shape[1] != dim:
            raise ShapeError(
                f"W1 shape {self.w1.shape} incompatible with input dim {dim}"
            )
        if self.b1.shape != (self.w1.shape[0],):
            raise ShapeError(f"b1 shape {self.b1.shape} does not match W1 rows")
        if (self.w2 is None) != (self.b2 is None):
            raise ShapeError("hidden layer needs both W2 and b2")
        if self.w2 is not None:
            if self.w2.shape[1] != self.w1.shape[0]:
                raise ShapeError(
                    f"W2 shape {self.w2.shape} does not match hidden dim {self.w1.shape[0]}"
                )
            if self.b2.shape != (self.w2.shape[0],):
                raise ShapeError(f"b2 shape {self.b2.shape} does not match W2 rows")
            self.num_classes = self.w2.shape[0]
        else:
            self.num_classes = self.w1.shape[0]
        self.input_shape = (c, h, w)

    @property
    def has_hidden(self) -> bool:
        return self.w2 is not None

    def raw_logits(self, x: np.ndarray) -> np.ndarray:
        flat = np.asarray(x, dtype=np.float64).reshape(x.shape[0], -1)
        z = flat @ self.w1.T + self.b1
        if self.w2 is None:
            return z
        return np.maximum(z, 0.0) @ self.w2.T + self.b2


def save_linear_oracle(oracle: LinearOracle, path: str | Path) -> None:
    """Serialize to the little-endian weights format (magic UAPW, v1)."""
    c, h, w = oracle.input_shape
    parts = [
        struct.pack(
            "<4sIIIIIB",
            WEIGHTS_MAGIC,
            WEIGHTS_VERSION,
            oracle.num_classes,
            c,
            h,
            w,
            1 if oracle.has_hidden else 0,
        )
    ]
    if oracle.has_hidden:
        parts.append(struct.pack("<I", oracle.w1.shape[0]))
    parts.append(oracle.w1.astype("<f4").tobytes(order="C"))
    parts.append(oracle.b1.astype("<f4").tobytes(order="C"))
    if oracle.has_hidden:
        parts.append(oracle.w2.astype("<f4").tobytes(order="C"))
        parts.append(oracle.b2.astype("<f4").tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


class _Cursor:
    """Sequential reader that reports the section and byte offset on failure."""

    def __init__(self, raw: bytes, origin: str):
        self.raw = raw
        self.origin = origin
        self.pos = 0

    def take(self, count: int, section: str) -> bytes:
        if self.pos + count > len(self.raw):
            raise FileFormatError(
                f"{self.origin}: truncated while reading {section} at byte {self.pos} "
                f"(need {count} bytes, have {len(self.raw) - self.pos})"
            )
        chunk = self.raw[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def u32(self, section: str) -> int:
        return struct.unpack("<I", self.take(4, section))[0]

    def u8(self, section: str) -> int:
        return self.take(1, section)[0]

    def f32_array(self, shape: tuple[int, ...], section: str) -> np.ndarray:
        count = int(np.prod(shape))
        data = self.take(4 * count, section)
        return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float64)


def load_linear_oracle(path: str | Path) -> LinearOracle:
    """Parse a UAPW weights file; malformed input raises FileFormatError with
    the offending section and byte offset."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FileFormatError(f"{path}: cannot read weights ({exc})") from exc
    cur = _Cursor(raw, str(path))
    magic = cur.take(4, "magic")
    if magic != WEIGHTS_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r} at byte 0")
    version = cur.u32("version")
    if version != WEIGHTS_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version} at byte 4")
    num_classes = cur.u32("num_classes")
    c = cur.u32("c")
    h = cur.u32("h")
    w = cur.u32("w")
    if num_classes < 1 or c < 1 or h < 1 or w < 1:
        raise FileFormatError(
            f"{path}: non-positive dimension in header (classes={num_classes}, "
            f"c={c}, h={h}, w={w})"
        )
    has_hidden = cur.u8("has_hidden")
    if has_hidden not in (0, 1):
        raise FileFormatError(f"{path}: has_hidden flag must be 0 or 1, got {has_hidden}")
    dim = c * h * w
    if has_hidden:
        hidden = cur.u32("hidden_dim")
        if hidden < 1:
            raise FileFormatError(f"{path}: hidden_dim must be positive, got {hidden}")
        w1 = cur.f32_array((hidden, dim), "W1")
        b1 = cur.f32_array((hidden,), "b1")
        w2 = cur.f32_array((num_classes, hidden), "W2")
        b2 = cur.f32_array((num_classes,), "b2")
        oracle = LinearOracle(w1, b1, (c, h, w), w2, b2)
    else:
        w1 = cur.f32_array((num_classes, dim), "W1")
        b1 = cur.f32_array((num_classes,), "b1")
        oracle = LinearOracle(w1, b1, (c, h, w))
    if cur.pos != len(raw):
        raise FileFormatError(
            f"{path}: {len(raw) - cur.pos} trailing bytes after b2 at byte {cur.pos}"
        )
    return oracle


# ---------------------------------------------------------------------------
# ONNX interchange backend
# ---------------------------------------------------------------------------

def load_descriptor(path: str | Path) -> dict:
    """Read and sanity-check a preprocessing descriptor JSON document."""
    try:
        meta = json.loads(Path(path).read_text())
    except OSError as exc:
        raise OnnxError(f"{path}: cannot read descriptor ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise OnnxError(f"{path}: descriptor is not valid JSON ({exc})") from exc
    for key in ("input_name", "output_name", "mean", "std", "input_size"):
        if key not in meta:
            raise OnnxError(f"{path}: descriptor missing required field '{key}'")
    if len(meta["mean"]) != 3 or len(meta["std"]) != 3:
        raise OnnxError(f"{path}: mean and std must each have 3 entries")
    if any(s <= 0 for s in meta["std"]):
        raise OnnxError(f"{path}: std entries must be positive")
    size = meta["input_size"]
    if isinstance(size, int):
        meta["input_size"] = [size, size]
    elif len(size) != 2:
        raise OnnxError(f"{path}: input_size must be an integer or [H, W]")
    return meta


class OnnxOracle(ClassifierOracle):
    """Executes an ONNX classifier graph on the CPU.

    The graph must have a single float input of shape N x 3 x H x W and a
    single logit output of shape N x num_classes; softmax is applied by the
    shared prediction surface, not by the graph.
    """

    def __init__(self, model, descriptor: dict, origin: str = "<onnx>"):
        from .onnx_exec import GraphExecutor

        self.model = model
        self.descriptor = descriptor
        self.origin = origin
        self.normalization = NormalizationSpec(
            mean=tuple(descriptor["mean"]),
            std=tuple(descriptor["std"]),
        )
        graph = model.graph
        self.input_name = descriptor["input_name"]
        self.output_name = descriptor["output_name"]
        graph_inputs = [v.name for v in graph.inputs if v.name not in graph.initializers]
        if self.input_name not in graph_inputs:
            raise OnnxError(
                f"{origin}: graph has no input named '{self.input_name}' "
                f"(inputs: {graph_inputs})"
            )
        if self.output_name not in [v.name for v in graph.outputs]:
            raise OnnxError(
                f"{origin}: graph has no output named '{self.output_name}' "
                f"(outputs: {[v.name for v in graph.outputs]})"
            )
        if len(graph_inputs) != 1:
            raise OnnxError(
                f"{origin}: expected a single graph input, found {graph_inputs}"
            )
        in_shape = graph.value_shape(self.input_name)
        if in_shape is None or len(in_shape) != 4:
            raise OnnxError(f"{origin}: input must be rank 4 (N, 3, H, W), got {in_shape}")
        c, h, w = in_shape[1], in_shape[2], in_shape[3]
        dh, dw = descriptor["input_size"]
        if c != 3:
            raise OnnxError(f"{origin}: input must have 3 channels, got {c}")
        if not isinstance(h, int) or not isinstance(w, int):
            raise OnnxError(f"{origin}: spatial input dims must be static, got {in_shape}")
        if (h, w) != (dh, dw):
            raise OnnxError(
                f"{origin}: graph input is {h}x{w} but descriptor declares {dh}x{dw}"
            )
        out_shape = graph.value_shape(self.output_name)
        if out_shape is None or len(out_shape) != 2 or not isinstance(out_shape[1], int):
            raise OnnxError(
                f"{origin}: output must be rank 2 (N, num_classes) with a static "
                f"class count, got {out_shape}"
            )
        self.input_shape = (3, h, w)
        self.num_classes = out_shape[1]
        self.executor = GraphExecutor(graph)
        unsupported = self.executor.unsupported_ops()
        if unsupported:
            raise OnnxError(
                f"{origin}: unsupported operator(s): {', '.join(sorted(unsupported))}"
            )

    def raw_logits(self, x: np.ndarray) -> np.ndarray:
        feed = {self.input_name: np.ascontiguousarray(x, dtype=np.float32)}
        out = self.executor.run(feed, [self.output_name])[self.output_name]
        return np.asarray(out, dtype=np.float64)


def load_onnx_oracle(model_path: str | Path, meta: str | Path | dict) -> OnnxOracle:
    """Load an ONNX graph plus its preprocessing descriptor.

    ``meta`` may be a descriptor dict or a path to the descriptor JSON file.
    """
    from .onnx_model import load_model

    descriptor = meta if isinstance(meta, dict) else load_descriptor(meta)
    model = load_model(model_path)
    return OnnxOracle(model, descriptor, origin=str(model_path))

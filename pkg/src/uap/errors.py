"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: configuration and input
validation failures exit 2, mid-run failures exit 1.
"""


class UapError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(UapError):
    """Tensor shapes inconsistent with the operation's contract."""


class ConfigError(UapError):
    """Invalid run configuration or command-line input."""


class DatasetError(UapError):
    """Manifest, image file, or label problems in a dataset."""


class FileFormatError(UapError):
    """Malformed binary artifact (weights or perturbation file); the message
    names the section and byte offset where parsing failed."""


class OnnxError(UapError):
    """Problems loading or executing an ONNX interchange model."""

"""Converters from torchvision classifiers to the ONNX subset the uap
toolkit executes, plus the matching preprocessing descriptors."""

from .export import ExportError, ExportSpec, SpecError, export_model

__all__ = ["ExportError", "ExportSpec", "SpecError", "export_model"]
__version__ = "0.1.0"

"""Coreset quantization-aware training with relative-entropy selection and layer correction."""

__version__ = "0.1.0"

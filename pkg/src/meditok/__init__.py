"""Desk-scale unified image tokenizer: two-stage training, quantization,
radiology preprocessing, and evaluation protocols on synthetic phantoms."""

__version__ = "0.1.0"

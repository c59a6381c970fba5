"""Toy low-light image enhancement with a learned codebook, light-factor
quantization, and light-aware prompt injection."""

__version__ = "0.1.0"

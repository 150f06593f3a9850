"""Federated, privacy-preserving side-information distillation for speaker verification."""

__version__ = "0.1.0"

"""Federated cross-modal style-aware prompt learning, desk-scale and verifiable."""

__version__ = "0.1.0"

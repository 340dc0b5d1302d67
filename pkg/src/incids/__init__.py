"""Signature plus novelty intrusion detection with gated class-incremental updates."""

__version__ = "0.1.0"

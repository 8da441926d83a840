"""Gradient modulation projection: decoupled per-modality gradient
modulation plus conflict-adaptive projection for two-modality
domain-generalization training, with a synthetic benchmark and CLI."""

__version__ = "0.1.0"

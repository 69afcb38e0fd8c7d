"""Modality-agnostic meta-learned fusion for multi-modal volumetric segmentation with missing modalities."""

__version__ = "0.1.0"

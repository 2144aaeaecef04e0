"""Evaluation and pipeline utilities for volumetric lesion segmentation."""

__version__ = "0.1.0"

"""Depth sensitivity suppression for domain-generalized RGB-D segmentation."""

__version__ = "0.1.0"

"""Joint masked-reconstruction and supervised training for volumetric segmentation."""

__version__ = "0.1.0"

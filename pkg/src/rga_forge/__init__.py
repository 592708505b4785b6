"""Region-guided adversarial attacks on promptable segmentation models."""

__version__ = "0.1.0"

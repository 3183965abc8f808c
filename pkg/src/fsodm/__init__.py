"""Few-shot object detection with support-conditioned feature reweighting."""

__version__ = "0.1.0"

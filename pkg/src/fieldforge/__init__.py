"""fieldforge: deterministic synthetic ground-truth pipeline for crop segmentation."""

__version__ = "0.1.0"

"""Cross-scanner MR augmentation by cycle-consistent translation."""

__version__ = "0.1.0"

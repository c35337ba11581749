"""Room-EQ-aware IR simulation and far-field speech augmentation."""

__version__ = "0.1.0"

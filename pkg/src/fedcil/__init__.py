"""Class-incremental federated learning with ACGAN generative replay."""
__version__ = "0.1.0"

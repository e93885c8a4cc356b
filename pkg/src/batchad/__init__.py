"""Training-free batch zero-shot anomaly detection over exported feature bundles."""

__version__ = "0.1.0"

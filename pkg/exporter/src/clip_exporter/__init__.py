"""One-time CLIP feature exporter producing engine-readable bundles."""

__version__ = "0.1.0"

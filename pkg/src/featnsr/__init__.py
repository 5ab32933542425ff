"""Neural SDF surface reconstruction with feature-level multi-view consistency."""

__version__ = "0.1.0"

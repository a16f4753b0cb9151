"""Multi-granularity referring expression segmentation toolkit."""

__version__ = "0.1.0"

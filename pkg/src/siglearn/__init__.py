"""Self-supervised pretext tasks for multivariate time-series signals."""

__version__ = "0.1.0"

"""Data-driven self-triggered predictive control of unknown LTI plants."""

__version__ = "0.1.0"

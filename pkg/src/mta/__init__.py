"""Multi-touch attribution with a log-linear inhomogeneous Poisson conversion model."""

__version__ = "0.1.0"

"""Weakly-supervised spatiotemporal anomaly detection by multiple-instance ranking over feature cells."""
__version__ = "0.1.0"

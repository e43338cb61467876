"""Species-distribution modelling with a from-scratch random forest."""

__version__ = "0.1.0"

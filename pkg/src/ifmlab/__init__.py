"""Information flow maximization (IFM) training laboratory."""

__version__ = "0.1.0"

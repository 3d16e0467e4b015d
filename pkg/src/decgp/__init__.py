"""Decentralized Gaussian process training and prediction over agent networks."""

__version__ = "0.1.0"

"""Unsupervised EEG feature fusion and hypergraph decoding."""

__version__ = "0.1.0"

"""Efficient title reranking with a broadcasting query encoder."""

__version__ = "0.1.0"

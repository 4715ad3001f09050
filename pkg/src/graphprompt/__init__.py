"""Subgraph-similarity pre-training and prompt tuning for few-shot graph learning."""

__version__ = "0.1.0"

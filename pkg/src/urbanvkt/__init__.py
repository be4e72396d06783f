"""Causal analysis of urban form features against car travel distance."""

__version__ = "0.1.0"

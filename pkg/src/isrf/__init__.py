"""Generative recommendation with semantic reasoning, dual graph propagation and alignment losses."""

__version__ = "0.1.0"

"""Inductive supply-chain link prediction with a dual-tower graph attention encoder."""

__version__ = "0.1.0"

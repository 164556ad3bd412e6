"""Desk-scale lab for side-channel leakage of Mixture-of-Experts routing."""

__version__ = "0.1.0"

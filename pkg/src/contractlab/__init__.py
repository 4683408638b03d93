"""Investor contracts with an informed bank running a pool of loans."""

__version__ = "0.1.0"

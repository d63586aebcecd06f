"""Desk-scale lab for multi-image positional encoding and video pair mining."""

__version__ = "0.1.0"

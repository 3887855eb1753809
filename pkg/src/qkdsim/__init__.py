"""Seedable simulator of QKD links, attacks, post-processing, Y00 and trusted-node networks."""

__version__ = "0.1.0"

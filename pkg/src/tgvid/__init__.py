"""Temporal video classifiers (SlowFast-micro, TSM-net) on a small numpy autograd engine."""

__version__ = "0.1.0"

"""Desk-scale lab for random-label bridge training and its diagnostics."""

__version__ = "0.1.0"

DEFINITIONS_VERSION = "bridgelab-metrics-1"

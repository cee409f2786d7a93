"""Canonical (CP) weight normalization: decompositions, reparametrized layers, compression."""

__version__ = "0.1.0"

"""Ternary weight splitting toolkit for binary-weight transformer encoders."""
__version__ = "1.0.0"

"""Desk-scale laboratory for causal-influence intrinsic rewards in the mobile paradigm."""

__version__ = "0.1.0"

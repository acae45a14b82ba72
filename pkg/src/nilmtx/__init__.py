"""Transformer-based non-intrusive load monitoring on a numpy autograd core."""

"""Asymmetric attention and factored keys."""

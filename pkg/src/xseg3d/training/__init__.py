"""Optimization, training loops and whole-volume inference."""

"""Sessionized continual-learning update engine."""

"""Trainable multiplication layers with constrained training, a classical
auto-correlation baseline, and the small CNN stack needed to run both."""

__version__ = "0.1.0"

"""Routed low-cost sensor calibration: refinement, training, routed inference, evaluation."""

__version__ = "0.1.0"

"""Plane-stress thermoelasticity on perforated boards: finite-difference
ground truth, physics-informed residual losses, and multi-task attention
U-Net surrogates."""

__version__ = "0.1.0"

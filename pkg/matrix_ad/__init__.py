"""matrix-ad - forward and reverse differentiation of matrix programs."""

__version__ = "0.1.0"

"""Kernel-expansion learnable activations and kernel-based recurrent networks."""

__version__ = "0.1.0"

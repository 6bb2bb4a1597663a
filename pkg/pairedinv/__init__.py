"""Paired autoencoders for likelihood-free wave-equation inversion"""

__version__ = "0.1.0"

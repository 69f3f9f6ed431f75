"""Multi-view cross-attention driving policy, its autodiff engine, and a 2D simulator to train it in."""

__version__ = "0.1.0"
